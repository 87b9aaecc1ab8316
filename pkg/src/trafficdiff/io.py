"""Scene datasets, model checkpoints and run configuration on disk.

Dataset files are UTF-8 text: a version header, then one scene per line
as space-separated ``key=value`` fields in a fixed order::

    # trafficdiff-scenes v1
    id=s0 seed=7 template=straight-road region=A model= density=0.5 lanes=... parking=... agents=...

``lanes`` holds ``x0,y0,x1,y1,width`` groups, ``parking`` holds
``cx,cy,heading,depth,length,stall_width`` groups and ``agents`` holds
``cx,cy,heading,length,width,probability`` groups, all joined by ``;``.
Floats use ``repr`` so values survive a round trip exactly. Text fields are
percent-encoded.

Checkpoints are binary: magic, a little-endian u32 format version, a
u64-length-prefixed JSON header, then named float64 arrays each stored as
``u32 name length, name, u64 byte count, raw data``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path
from urllib.parse import quote, unquote

import numpy as np

from .autoencoder import SceneAutoencoder
from .detection import MatchWeights
from .diffusion import LatentDiffusion
from .geometry import OrientedBox
from .raster import TEMPLATES, LaneSegment, ParkingRow, RoadMap, Scene

DATASET_HEADER = "# trafficdiff-scenes v1"
FIELDS = ("id", "seed", "template", "region", "model", "density", "lanes", "parking", "agents")
CHECKPOINT_MAGIC = b"TDCKPT\x00\x01"
CHECKPOINT_VERSION = 1


class DataError(ValueError):
    """Malformed or incompatible dataset or checkpoint."""


class ConfigError(ValueError):
    pass


# -- datasets -------------------------------------------------------------

def _groups(rows) -> str:
    return ";".join(",".join(repr(float(v)) for v in row) for row in rows)


def _parse_groups(text: str, width: int, what: str):
    if not text:
        return []
    out = []
    for grp in text.split(";"):
        vals = grp.split(",")
        if len(vals) != width:
            raise DataError(f"{what} group {grp!r} needs {width} values")
        try:
            out.append([float(v) for v in vals])
        except ValueError as exc:
            raise DataError(f"bad number in {what} group {grp!r}") from exc
    return out


def format_scene(scene: Scene) -> str:
    rm = scene.road_map
    vals = {
        "id": quote(scene.scene_id, safe=""),
        "seed": str(int(scene.seed)),
        "template": quote(scene.template, safe=""),
        "region": quote(scene.region_tag, safe=""),
        "model": quote(scene.model_tag, safe=""),
        "density": repr(float(scene.density)),
        "lanes": _groups((*l.start, *l.end, l.width) for l in rm.lanes),
        "parking": _groups((*p.center, p.heading, p.depth, p.length, p.stall_width)
                           for p in rm.parking),
        "agents": _groups((*a.center, a.heading, a.length, a.width, a.probability)
                          for a in scene.agents),
    }
    return " ".join(f"{k}={vals[k]}" for k in FIELDS)


def parse_scene(line: str) -> Scene:
    parts = line.strip().split(" ")
    keys = [p.split("=", 1)[0] for p in parts]
    if tuple(keys) != FIELDS or any("=" not in p for p in parts):
        raise DataError(f"scene record fields must be {' '.join(FIELDS)}")
    v = dict(p.split("=", 1) for p in parts)
    try:
        seed, density = int(v["seed"]), float(v["density"])
    except ValueError as exc:
        raise DataError(f"bad seed or density in record {v['id']!r}") from exc
    try:
        lanes = tuple(LaneSegment((g[0], g[1]), (g[2], g[3]), g[4])
                      for g in _parse_groups(v["lanes"], 5, "lane"))
        parking = tuple(ParkingRow((g[0], g[1]), g[2], g[3], g[4], g[5])
                        for g in _parse_groups(v["parking"], 6, "parking"))
        agents = tuple(OrientedBox((g[0], g[1]), g[2], g[3], g[4], g[5])
                       for g in _parse_groups(v["agents"], 6, "agent"))
    except DataError:
        raise
    except ValueError as exc:
        raise DataError(f"invalid geometry in record {v['id']!r}: {exc}") from exc
    return Scene(RoadMap(lanes, parking), agents, unquote(v["region"]), seed,
                 unquote(v["template"]), density, unquote(v["id"]), unquote(v["model"]))


def write_scenes(path, scenes) -> None:
    lines = [DATASET_HEADER] + [format_scene(s) for s in scenes]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scenes(path) -> list[Scene]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != DATASET_HEADER:
        raise DataError(f"{path}: missing header {DATASET_HEADER!r}")
    return [parse_scene(ln) for ln in lines[1:] if ln.strip()]


# -- checkpoints ----------------------------------------------------------

def write_checkpoint(path, header: dict, arrays: dict) -> None:
    """Write ``header`` (JSON-serializable) and named float64 ``arrays``."""
    header = dict(header, arrays=[[k, list(np.shape(a))] for k, a in arrays.items()])
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)), blob]
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        key = name.encode("utf-8")
        chunks += [struct.pack("<I", len(key)), key, struct.pack("<Q", len(raw)), raw]
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path):
    """Returns ``(header, arrays)``; raises :class:`DataError` on any mismatch."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, n = struct.unpack_from("<IQ", data, pos)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        pos += 12
        header = json.loads(data[pos:pos + n].decode("utf-8"))
        pos += n
        arrays = {}
        for name, shape in header.pop("arrays"):
            (k,) = struct.unpack_from("<I", data, pos)
            got = data[pos + 4:pos + 4 + k].decode("utf-8")
            pos += 4 + k
            (nbytes,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if got != name or nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
                raise DataError(f"array {name!r} does not match the manifest")
            if pos + nbytes > len(data):
                raise DataError(f"array {name!r} is truncated")
            arrays[name] = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
    if pos != len(data):
        raise DataError(f"trailing bytes in checkpoint {path}")
    return header, arrays


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _estimator_params(est) -> dict:
    out = {}
    for k, v in est.get_params(deep=False).items():
        if k == "autoencoder":
            continue
        if isinstance(v, MatchWeights):
            v = dataclasses.asdict(v)
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _training_state(est) -> tuple[dict, dict]:
    header = {
        "n_steps_done": est.n_steps_done_,
        "adam_steps": est.optimizer_.step_count,
        "adam_lr": est.optimizer_.lr,
        "rng": est.rng_.bit_generator.state,
    }
    arrays = {f"param.{k}": p for k, p in enumerate(est.params_)}
    arrays.update(est.optimizer_.state_arrays())
    arrays["loss_log"] = np.asarray(est.loss_log_, dtype=np.float64).reshape(-1, 4)
    return header, arrays


def _restore_training_state(est, header, arrays) -> None:
    try:
        for k, p in enumerate(est.params_):
            src = arrays[f"param.{k}"]
            if src.shape != p.shape:
                raise DataError(f"parameter {k} has shape {src.shape}, expected {p.shape}")
            p[...] = src
        est.optimizer_.load_state_arrays(arrays, header["adam_steps"])
        est.optimizer_.lr = header["adam_lr"]
    except KeyError as exc:
        raise DataError(f"checkpoint is missing {exc}") from exc
    est.rng_.bit_generator.state = header["rng"]
    est.n_steps_done_ = int(header["n_steps_done"])
    est.loss_log_ = [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in arrays["loss_log"]]


def _tuples(params: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}


def save_autoencoder(ae: SceneAutoencoder, path) -> None:
    header, arrays = _training_state(ae)
    header.update(kind="autoencoder", params=_estimator_params(ae))
    write_checkpoint(path, header, arrays)


def load_autoencoder(path) -> SceneAutoencoder:
    header, arrays = read_checkpoint(path)
    if header.get("kind") != "autoencoder":
        raise DataError(f"{path} holds a {header.get('kind')!r} checkpoint, not an autoencoder")
    params = _tuples(header["params"])
    if params.get("match_weights") is not None:
        params["match_weights"] = MatchWeights(**params["match_weights"])
    ae = SceneAutoencoder(**params)
    ae._build()
    _restore_training_state(ae, header, arrays)
    return ae


def save_diffusion(model: LatentDiffusion, path, ae_path=None) -> None:
    """Save the denoiser; ``ae_path`` records which autoencoder it belongs to."""
    header, arrays = _training_state(model)
    header.update(kind="denoiser", params=_estimator_params(model),
                  latent_scale=model.latent_scale_, model_tag=getattr(model, "model_tag_", ""),
                  autoencoder_sha256=file_digest(ae_path) if ae_path else None)
    write_checkpoint(path, header, arrays)


def load_diffusion(path, autoencoder: SceneAutoencoder, ae_path=None) -> LatentDiffusion:
    header, arrays = read_checkpoint(path)
    if header.get("kind") != "denoiser":
        raise DataError(f"{path} holds a {header.get('kind')!r} checkpoint, not a denoiser")
    want = header.get("autoencoder_sha256")
    if ae_path is not None and want is not None and file_digest(ae_path) != want:
        raise DataError(f"{path} was trained against a different autoencoder")
    model = LatentDiffusion(autoencoder=autoencoder, **_tuples(header["params"]))
    model._build(np.ones(1))
    _restore_training_state(model, header, arrays)
    model.latent_scale_ = float(header["latent_scale"])
    model.model_tag_ = header.get("model_tag", "")
    return model


# -- config ---------------------------------------------------------------

AE_KEYS = ("raster_size", "extent_m", "downsample", "latent_channels", "grid_size", "beta_kl",
           "match_weights", "encoder_hidden", "decoder_hidden", "activation", "learning_rate",
           "weight_decay", "lr_decay_steps", "n_steps", "batch_size", "random_state")
DIFF_KEYS = ("p_mean", "p_std", "sigma_data", "sigma_min", "sigma_max", "rho", "num_steps",
             "beta_y", "hidden", "activation", "learning_rate", "weight_decay", "lr_decay_steps",
             "n_steps", "batch_size", "decoded_batch", "random_state")
SYNTH_KEYS = ("templates", "density", "regions")
TOP_KEYS = ("seed", "p_min", "synth", "autoencoder", "diffusion", "data")
DATA_KEYS = ("train", "reference", "generated", "autoencoder", "denoiser", "maps")

DEFAULT_REGIONS = {"straight-road": "A", "intersection": "B", "parking-row": "C"}


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    p_min: float = 0.9
    synth: dict = dataclasses.field(default_factory=dict)
    autoencoder: dict = dataclasses.field(default_factory=dict)
    diffusion: dict = dataclasses.field(default_factory=dict)
    data: dict = dataclasses.field(default_factory=dict)

    @property
    def templates(self) -> tuple[str, ...]:
        return tuple(self.synth.get("templates", ("straight-road",)))

    @property
    def density(self) -> float:
        return float(self.synth.get("density", 0.5))

    @property
    def regions(self) -> dict:
        return {**DEFAULT_REGIONS, **self.synth.get("regions", {})}

    def make_autoencoder(self, **overrides) -> SceneAutoencoder:
        params = _tuples(self.autoencoder)
        if params.get("match_weights") is not None:
            params["match_weights"] = MatchWeights(**params["match_weights"])
        return SceneAutoencoder(**{**params, **overrides})

    def make_diffusion(self, autoencoder, **overrides) -> LatentDiffusion:
        return LatentDiffusion(autoencoder=autoencoder, p_min=self.p_min,
                               **{**_tuples(self.diffusion), **overrides})


def _reject_unknown(section: dict, allowed, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(section) - set(allowed))
    if extra:
        raise ConfigError(f"unknown {where} key(s): {', '.join(extra)}")


def parse_config(raw: dict) -> RunConfig:
    """Validate a config mapping; any invalid or unknown setting raises :class:`ConfigError`."""
    _reject_unknown(raw, TOP_KEYS, "top-level")
    for name, keys in (("synth", SYNTH_KEYS), ("autoencoder", AE_KEYS),
                       ("diffusion", DIFF_KEYS), ("data", DATA_KEYS)):
        _reject_unknown(raw.get(name, {}), keys, name)
    cfg = RunConfig(**raw)
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed must be an integer")
    if not 0.0 < float(cfg.p_min) < 1.0:
        raise ConfigError("p_min must lie in (0, 1)")
    bad = [t for t in cfg.templates if t not in TEMPLATES]
    if bad or not cfg.templates:
        raise ConfigError(f"templates must be a non-empty subset of {TEMPLATES}")
    if not 0.0 <= cfg.density <= 1.0:
        raise ConfigError("density must lie in [0, 1]")
    if cfg.autoencoder.get("match_weights") is not None:
        mw = cfg.autoencoder["match_weights"]
        _reject_unknown(mw, [f.name for f in dataclasses.fields(MatchWeights)], "match_weights")
    try:
        ae = cfg.make_autoencoder()
        ae._check_params()
        ae.raster_spec, ae.grid_spec, MatchWeights(**cfg.autoencoder.get("match_weights") or {})
        cfg.make_diffusion(ae)._check_params()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw)
