import json
import math

import numpy as np
import pytest

from test_autoencoder import tiny_scenes
from trafficdiff import io
from trafficdiff.cli import format_table, main, scene_seeds
from trafficdiff.geometry import OrientedBox
from trafficdiff.raster import Scene, synth_scene, template_map, validate_scene

TINY_AE = dict(raster_size=16, extent_m=16.0, downsample=2, grid_size=4, encoder_hidden=[8],
               decoder_hidden=[16], batch_size=4)
TINY_DIFF = dict(hidden=[16], batch_size=4, decoded_batch=2)


def write_config(path, **sections):
    raw = {"seed": 1, "synth": {"templates": ["straight-road", "intersection"], "density": 0.5},
           "autoencoder": {**TINY_AE, "n_steps": 4}, "diffusion": {**TINY_DIFF, "n_steps": 4}}
    for k, v in sections.items():
        raw[k] = {**raw.get(k, {}), **v} if isinstance(v, dict) else v
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture
def cfg(tmp_path):
    return write_config(tmp_path / "cfg.json")


def run(*argv):
    return main([str(a) for a in argv])


# dataset files

def test_scene_record_round_trip(tmp_path):
    scenes = [synth_scene(s, t, 0.7, region_tag="R 1") for s, t in
              [(3, "straight-road"), (4, "intersection"), (5, "parking-row")]]
    scenes.append(Scene(template_map("parking-row"), (), "", 0, "parking-row", 0.0, "a=b;c", "m,x"))
    p, q = tmp_path / "a.txt", tmp_path / "b.txt"
    io.write_scenes(p, scenes)
    back = io.read_scenes(p)
    assert back == scenes
    io.write_scenes(q, back)
    assert p.read_bytes() == q.read_bytes()


def test_parse_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("not a header\n")
    with pytest.raises(io.DataError):
        io.read_scenes(p)
    line = io.format_scene(synth_scene(1, "straight-road", 0.5))
    for bad in (line.replace("seed=", "sead="), line.replace("agents=", "agents=1,2;"),
                line.replace("density=0.5", "density=x"), line + " extra=1"):
        with pytest.raises(io.DataError):
            io.parse_scene(bad)
    with pytest.raises(io.DataError):
        io.read_scenes(tmp_path / "missing.txt")


def test_synth_count_zero_writes_header_only(tmp_path, cfg):
    out = tmp_path / "empty.txt"
    assert run("synth", "--config", cfg, "--count", 0, "--out", out) == 0
    assert out.read_text() == io.DATASET_HEADER + "\n"
    assert io.read_scenes(out) == []


def test_synth_deterministic(tmp_path, cfg):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    for out in (a, b):
        assert run("synth", "--config", cfg, "--count", 16, "--seed", 1, "--out", out) == 0
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.txt"
    run("synth", "--config", cfg, "--count", 16, "--seed", 2, "--out", c)
    assert c.read_bytes() != a.read_bytes()


@pytest.mark.slow
def test_synth_thousand_scenes_validate(tmp_path):
    cfg = write_config(tmp_path / "cfg.json",
                       synth={"templates": ["straight-road", "intersection", "parking-row"]})
    out = tmp_path / "big.txt"
    assert run("synth", "--config", cfg, "--count", 1000, "--out", out) == 0
    scenes = io.read_scenes(out)
    assert len(scenes) == 1000
    for s in scenes:
        validate_scene(s)


def test_scene_seeds_distinct():
    seeds = scene_seeds(0, 200)
    assert len(set(seeds)) == 200 and seeds == scene_seeds(0, 200)


# checkpoints

def test_checkpoint_format(tmp_path, rng):
    arrays = {"w": rng.normal(size=(3, 2)), "empty": np.zeros((0, 4)), "s": np.array(2.5)}
    p = tmp_path / "x.ckpt"
    io.write_checkpoint(p, {"kind": "test", "n": 3}, arrays)
    header, back = io.read_checkpoint(p)
    assert header["kind"] == "test" and header["n"] == 3
    for k, v in arrays.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
    q = tmp_path / "y.ckpt"
    io.write_checkpoint(q, header, back)
    assert p.read_bytes() == q.read_bytes()
    raw = p.read_bytes()
    for broken in (b"XXXXXXXX" + raw[8:], raw[:-3], raw + b"\x00"):
        p.write_bytes(broken)
        with pytest.raises(io.DataError):
            io.read_checkpoint(p)


def test_zero_steps_checkpoint_is_initialization(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", autoencoder={"n_steps": 0})
    data, out = tmp_path / "d.txt", tmp_path / "ae.ckpt"
    run("synth", "--config", cfg, "--count", 3, "--out", data)
    assert run("train-ae", "--config", cfg, "--data", data, "--out", out) == 0
    ae = io.load_autoencoder(out)
    fresh = io.RunConfig(**json.loads((tmp_path / "cfg.json").read_text())).make_autoencoder(
        random_state=1)
    fresh._build()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(ae.params_, fresh.params_))
    assert (tmp_path / "ae.ckpt.log").read_text() == ""


def test_autoencoder_reload_bit_stable(tmp_path, cfg):
    data, out, again = tmp_path / "d.txt", tmp_path / "ae.ckpt", tmp_path / "ae2.ckpt"
    run("synth", "--config", cfg, "--count", 3, "--out", data)
    assert run("train-ae", "--config", cfg, "--data", data, "--out", out) == 0
    io.save_autoencoder(io.load_autoencoder(out), again)
    assert out.read_bytes() == again.read_bytes()
    log = (tmp_path / "ae.ckpt.log").read_text().splitlines()
    assert [int(r.split()[0]) for r in log] == [0, 1, 2, 3]
    assert all(len(r.split()) == 4 for r in log)


def _arrays(path):
    return io.read_checkpoint(path)[1]


def test_resume_equivalence(tmp_path):
    full = write_config(tmp_path / "full.json", autoencoder={"n_steps": 6, "lr_decay_steps": 6})
    half = write_config(tmp_path / "half.json", autoencoder={"n_steps": 3, "lr_decay_steps": 6})
    data = tmp_path / "d.txt"
    run("synth", "--config", full, "--count", 5, "--out", data)
    run("train-ae", "--config", full, "--data", data, "--out", tmp_path / "full.ckpt")
    run("train-ae", "--config", half, "--data", data, "--out", tmp_path / "half.ckpt")
    assert run("train-ae", "--config", half, "--data", data, "--resume", tmp_path / "half.ckpt",
               "--out", tmp_path / "resumed.ckpt") == 0
    a, b = _arrays(tmp_path / "full.ckpt"), _arrays(tmp_path / "resumed.ckpt")
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert ((tmp_path / "full.ckpt.log").read_bytes()
            == (tmp_path / "resumed.ckpt.log").read_bytes())


@pytest.fixture
def trained(tmp_path, cfg):
    data, ae = tmp_path / "d.txt", tmp_path / "ae.ckpt"
    run("synth", "--config", cfg, "--count", 4, "--out", data)
    run("train-ae", "--config", cfg, "--data", data, "--out", ae)
    return tmp_path, cfg, data, ae


def test_train_diff_keeps_autoencoder_and_resumes(trained):
    tmp, cfg, data, ae = trained
    digest = io.file_digest(ae)
    assert run("train-diff", "--config", cfg, "--data", data, "--ae", ae, "--out", tmp / "df") == 0
    assert io.file_digest(ae) == digest
    log = np.loadtxt(tmp / "df.log")
    assert log.shape == (4, 4) and np.all(log[:, 2] > 0)
    np.testing.assert_allclose(log[:, 3], log[:, 1] + 0.2 * log[:, 2])
    assert run("train-diff", "--config", cfg, "--data", data, "--ae", ae, "--resume", tmp / "df",
               "--out", tmp / "df2") == 0
    assert np.loadtxt(tmp / "df2.log").shape == (8, 4)


def test_beta_y_zero_logs_zero_column(tmp_path):
    cfg = write_config(tmp_path / "b0.json", autoencoder={"n_steps": 300, "learning_rate": 3e-3},
                       diffusion={"beta_y": 0.0, "n_steps": 200, "learning_rate": 3e-3})
    data, ae, df = tmp_path / "d.txt", tmp_path / "ae", tmp_path / "df"
    run("synth", "--config", cfg, "--count", 4, "--out", data)
    run("train-ae", "--config", cfg, "--data", data, "--out", ae)
    assert run("train-diff", "--config", cfg, "--data", data, "--ae", ae, "--out", df) == 0
    log = np.loadtxt(tmp_path / "df.log")
    assert np.all(log[:, 2] == 0.0)
    np.testing.assert_array_equal(log[:, 3], log[:, 1])
    # per-step values are noisy (random sigma per example); compare window means
    assert log[-50:, 1].mean() < 0.8 * log[:50, 1].mean()


def test_mismatched_autoencoder_rejected(trained, cfg):
    tmp, _, data, ae = trained
    run("train-diff", "--config", cfg, "--data", data, "--ae", ae, "--out", tmp / "df")
    other = tmp / "other.ckpt"
    run("train-ae", "--config", cfg, "--data", data, "--seed", 9, "--out", other)
    assert run("sample", "--config", cfg, "--ae", other, "--denoiser", tmp / "df",
               "--maps", data, "--out", tmp / "g.txt") == 3
    assert run("sample", "--config", cfg, "--ae", tmp / "df", "--denoiser", tmp / "df",
               "--maps", data, "--out", tmp / "g.txt") == 3


def test_sample_deterministic_and_svg(trained):
    tmp, cfg, data, ae = trained
    run("train-diff", "--config", cfg, "--data", data, "--ae", ae, "--out", tmp / "df")
    outs = []
    for name in ("g1.txt", "g2.txt"):
        assert run("sample", "--config", cfg, "--ae", ae, "--denoiser", tmp / "df", "--maps", data,
                   "--count", 1, "--seed", 5, "--out", tmp / name, "--svg-dir", tmp / "svg") == 0
        outs.append((tmp / name).read_bytes())
    assert outs[0] == outs[1]
    gen = io.read_scenes(tmp / "g1.txt")
    maps = io.read_scenes(data)
    assert [g.scene_id for g in gen] == [m.scene_id for m in maps]
    assert all(g.road_map == m.road_map for g, m in zip(gen, maps))
    svgs = sorted((tmp / "svg").glob("*.svg"))
    assert len(svgs) == 4 and svgs[0].read_text().startswith("<svg")


def test_render(tmp_path, cfg):
    data = tmp_path / "d.txt"
    run("synth", "--config", cfg, "--count", 3, "--out", data)
    assert run("render", "--config", cfg, "--data", data, "--out", tmp_path / "svg") == 0
    text = sorted((tmp_path / "svg").glob("*.svg"))[0].read_text()
    assert text.count("<polygon") >= 2 and "<line" in text


# evaluation

def _tagged(scenes, model):
    return [Scene(s.road_map, s.agents, s.region_tag, s.seed, s.template, s.density, s.scene_id,
                  model) for s in scenes]


def test_eval_identical_is_zero(tmp_path, cfg, capsys):
    data = tmp_path / "d.txt"
    run("synth", "--config", cfg, "--count", 4, "--out", data)
    assert run("eval", "--config", cfg, "--generated", data, "--reference", data,
               "--out", tmp_path / "r.jsonl") == 0
    recs = [json.loads(r) for r in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert {r["region"] for r in recs} == {"A", "B"}
    assert all(r["position_mmd2"] == 0.0 and r["heading_mmd2"] == 0.0 for r in recs)


def test_eval_cross_region_table(tmp_path, cfg, capsys):
    ref = tmp_path / "ref.txt"
    run("synth", "--config", cfg, "--count", 6, "--out", ref)
    refs = io.read_scenes(ref)
    paths = []
    for model, shift in (("A", 100), ("B", 200)):
        gen = [synth_scene(s.seed + shift, s.template, 0.5, region_tag=s.region_tag) for s in refs]
        gen = [Scene(g.road_map, g.agents, g.region_tag, g.seed, g.template, g.density, r.scene_id,
                     model) for g, r in zip(gen, refs)]
        paths.append(tmp_path / f"{model}.txt")
        io.write_scenes(paths[-1], gen)
    capsys.readouterr()
    assert run("eval", "--config", cfg, "--generated", *paths, "--reference", ref,
               "--out", tmp_path / "r.jsonl") == 0
    text = capsys.readouterr().out
    lines = text.splitlines()
    assert lines[0] == "position_mmd2"
    assert lines[1].split() == ["model", "A", "B"]
    assert [ln.split()[0] for ln in lines[3:5]] == ["A", "B"]
    recs = [json.loads(r) for r in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(recs) == 4 and all(0 < r["position_mmd2"] < 2 for r in recs)
    first = (tmp_path / "r.jsonl").read_bytes()
    run("eval", "--config", cfg, "--generated", *paths, "--reference", ref, "--out", tmp_path / "r.jsonl")
    assert (tmp_path / "r.jsonl").read_bytes() == first


def test_eval_unmatched_maps(tmp_path, cfg, capsys):
    ref, gen = tmp_path / "ref.txt", tmp_path / "gen.txt"
    run("synth", "--config", cfg, "--count", 2, "--out", ref)
    run("synth", "--config", cfg, "--count", 2, "--seed", 99, "--out", gen)
    assert run("eval", "--config", cfg, "--generated", gen, "--reference", ref) == 3
    assert "without a reference map" in capsys.readouterr().err


def test_format_table_missing_cell():
    recs = [{"model": "A", "region": "A", "position_mmd2": 0.1},
            {"model": "B", "region": "B", "position_mmd2": 0.2}]
    table = format_table(recs)
    assert "-" in table.splitlines()[3].split()


# config and exit codes

@pytest.mark.parametrize("section,extra", [
    ("top", {"bogus": 1}), ("autoencoder", {"nsteps": 3}), ("diffusion", {"sigma": 1.0}),
    ("synth", {"template": "x"}), ("data", {"training": "x"}),
])
def test_unknown_config_keys(tmp_path, section, extra, capsys):
    raw = json.loads(open(write_config(tmp_path / "c.json")).read())
    if section == "top":
        raw.update(extra)
    else:
        raw.setdefault(section, {}).update(extra)
    (tmp_path / "c.json").write_text(json.dumps(raw))
    assert run("synth", "--config", tmp_path / "c.json", "--out", tmp_path / "o.txt") == 2
    assert "unknown" in capsys.readouterr().err


@pytest.mark.parametrize("sections", [
    {"p_min": 1.5}, {"seed": "x"}, {"synth": {"templates": ["highway"]}},
    {"autoencoder": {"raster_size": 18}}, {"diffusion": {"sigma_min": 100.0}},
    {"autoencoder": {"beta_kl": -1.0}},
])
def test_invalid_config_values(tmp_path, sections):
    cfg = write_config(tmp_path / "c.json", **sections)
    assert run("synth", "--config", cfg, "--out", tmp_path / "o.txt") == 2


def test_exit_codes(tmp_path, cfg):
    assert run("synth", "--config", tmp_path / "nope.json", "--out", tmp_path / "o") == 2
    (tmp_path / "bad.json").write_text("{")
    assert run("synth", "--config", tmp_path / "bad.json", "--out", tmp_path / "o") == 2
    assert run("synth", "--config", cfg, "--count", -1, "--out", tmp_path / "o") == 2
    assert run("train-ae", "--config", cfg, "--data", tmp_path / "missing.txt",
               "--out", tmp_path / "ae") == 3
    assert run("train-ae", "--config", cfg, "--out", tmp_path / "ae") == 2
    assert run("synth", "--config", cfg, "--out", tmp_path / "no" / "dir" / "o.txt") == 3


def test_divergence_exit_code(tmp_path):
    cfg = write_config(tmp_path / "c.json", autoencoder={"learning_rate": 1e200, "n_steps": 20})
    data = tmp_path / "d.txt"
    run("synth", "--config", cfg, "--count", 2, "--out", data)
    with np.errstate(all="ignore"):
        assert run("train-ae", "--config", cfg, "--data", data, "--out", tmp_path / "ae") == 4
