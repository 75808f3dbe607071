import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from liftnet import cli
from liftnet.architectures import build_perceptron, forward_block, random_mlp
from liftnet.config import (PAPER_SCALE, ConfigError, RunConfig, build_config, load_config, parse_config,
                            serialize_config)
from liftnet.io import (CheckpointError, checkpoint_bytes, load_checkpoint, read_csv, read_manifest, read_pgm,
                        save_checkpoint, write_csv, write_pgm)
from liftnet.prox import Identity, Relu

from test_architectures import all_networks

CONFIGS = Path(__file__).resolve().parents[1] / "scripts" / "configs"


def write_config(tmp_path, text, name="run.conf"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(tmp_path, command, text="", *extra):
    out = tmp_path / f"out_{command}"
    args = [command, "--out", str(out), *extra]
    if text is not None:
        args += ["--config", write_config(tmp_path, text, f"{command}.conf")]
    return cli.main(args), out


SMALL_TRAIN = """
data_count = 6
data_val_count = 2
data_size = 8
hidden = 12
layers = 2
steps = 4
record_every = 2
image_every = 2
image_count = 2
"""


# Configuration


def test_config_round_trip_defaults():
    cfg = RunConfig()
    assert build_config(parse_config(serialize_config(cfg))) == cfg


@given(st.integers(0, 1000), st.floats(1e-6, 1.0), st.sampled_from(["adam", "plain", "nesterov", "heavyball"]),
       st.booleans(), st.sampled_from(["relu", "soft_shrink:0.05", "identity"]))
def test_config_round_trip(seed, mu, variant, wall, act):
    cfg = RunConfig(seed=seed, mu=mu, variant=variant, record_wall_time=wall, activation=act)
    text = serialize_config(cfg)
    assert build_config(parse_config(text)) == cfg
    assert serialize_config(build_config(parse_config(text))) == text


def test_config_parsing_rules():
    vals = parse_config("# comment\n\nseed = 3  # trailing\nrecord_wall_time = true\nmu = 0.5\n")
    assert vals == {"seed": 3, "record_wall_time": True, "mu": 0.5}
    for bad in ("colour = red", "seed = 1\nseed = 2", "seed = many", "record_wall_time = yes", "just words"):
        with pytest.raises(ConfigError):
            parse_config(bad)


@pytest.mark.parametrize("change", [dict(task="fit"), dict(precision=16), dict(mu=0.0), dict(blur_size=4),
                                    dict(inpaint_drop=1.0), dict(p1=1.0), dict(activation="swish"),
                                    dict(bench_layers="0,2"), dict(data_source="mnist"), dict(steps=-1)])
def test_config_validation(change):
    with pytest.raises(ConfigError):
        RunConfig(**change)


def test_paper_scale_and_overrides(tmp_path):
    cfg = build_config({"steps": 5}, paper_scale=True)
    assert cfg.hidden == PAPER_SCALE["hidden"] and cfg.steps == 5 and cfg.data_count == 5000
    path = write_config(tmp_path, "seed = 2\n")
    assert load_config(path, seed=9).seed == 9
    assert load_config(path, seed=None).seed == 2


def test_published_configs_validate():
    deblur = build_config(parse_config((CONFIGS / "deblur.conf").read_text()), paper_scale=True)
    assert (deblur.blur_size, deblur.blur_sigma, deblur.noise_sigma) == (5, 1.0, 0.03)
    assert (deblur.mu, deblur.lr, deblur.lr_aux, deblur.hidden, deblur.layers) == (5e-3, 8e-4, 8e-4, 784, 7)
    assert deblur.steps == 50000 and deblur.data_count == 5000 and deblur.data_val_count == 500
    assert build_config(parse_config((CONFIGS / "inpaint.conf").read_text())).lr == 1e-4
    inv = build_config(parse_config((CONFIGS / "invert.conf").read_text()))
    assert (inv.invert_alpha, inv.pdhg_iters, inv.pdhg_tol, inv.outer_iters, inv.invert_noise) == (
        7e-2, 1000, 1e-5, 500, 0.1)


# Checkpoints


@pytest.mark.parametrize("name", list(all_networks(np.random.default_rng(0))))
def test_checkpoint_round_trip_bit_identical(name, tmp_path, rng):
    net = all_networks(np.random.default_rng(5))[name]
    save_checkpoint(tmp_path / "c.bin", net)
    back = load_checkpoint(tmp_path / "c.bin")
    y = rng.standard_normal((4, net.input_dim))
    assert np.max(np.abs(forward_block(back, y).output - forward_block(net, y).output)) == 0
    assert back.learnable == net.learnable and back.builder == net.builder
    assert checkpoint_bytes(back) == checkpoint_bytes(net)


def test_checkpoint_keeps_float32(tmp_path, rng):
    net = random_mlp([3, 4, 2], 2, Relu(), rng, dtype=np.float32)
    save_checkpoint(tmp_path / "c.bin", net)
    back = load_checkpoint(tmp_path / "c.bin")
    y = rng.standard_normal((2, 3)).astype(np.float32)
    assert back.dtype == np.float32
    assert np.array_equal(forward_block(back, y).output, forward_block(net, y).output)


def test_manifest_sizes_match_blobs(rng):
    data = checkpoint_bytes(random_mlp([3, 5, 2], 2, Relu(), rng))
    manifest, base = read_manifest(data)
    total = 0
    for block in manifest["blocks"]:
        assert block["nbytes"] == 8 * int(np.prod(block["shape"]))
        assert block["offset"] == total
        total += block["nbytes"]
    assert len(data) - base == total
    assert manifest["endianness"] == "little" and manifest["version"] == 1


@pytest.mark.parametrize("damage", ["truncate", "flip", "magic", "trailing", "version", "length"])
def test_checkpoint_integrity_errors(damage, tmp_path, rng):
    data = bytearray(checkpoint_bytes(random_mlp([3, 4, 2], 2, Relu(), rng)))
    if damage == "truncate":
        data = data[:-5]
    elif damage == "flip":
        data[-3] ^= 0xFF
    elif damage == "magic":
        data[0:4] = b"XXXX"
    elif damage == "trailing":
        data += b"\0"
    elif damage == "version":
        data = bytes(data).replace(b'"version": 1', b'"version": 7')
    else:
        manifest, base = read_manifest(bytes(data))
        manifest["blocks"][0]["nbytes"] += 8
        text = json.dumps(manifest).encode()
        data = b"LIFTNET-CHECKPOINT\n" + f"{len(text)}\n".encode() + text + bytes(data[base:])
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# Files


def test_pgm_round_trip(tmp_path, rng):
    img = rng.uniform(-0.2, 1.2, (5, 7))
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n") and len(raw) == len(b"P5\n7 5\n255\n") + 35
    back = read_pgm(tmp_path / "a.pgm")
    np.testing.assert_allclose(back, np.clip(img, 0, 1), atol=0.5 / 255 + 1e-12)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "b.pgm", np.zeros(4))


def test_csv_format(tmp_path):
    write_csv(tmp_path / "m.csv", ["a", "b"], [{"a": 1, "b": 0.1}, {"a": 2, "b": float("nan")}])
    assert (tmp_path / "m.csv").read_bytes() == b"a,b\n1,0.1\n2,nan\n"
    assert read_csv(tmp_path / "m.csv")[0] == {"a": "1", "b": "0.1"}


# Subcommands


def test_train_writes_outputs(tmp_path):
    code, out = run(tmp_path, "train", SMALL_TRAIN)
    assert code == 0
    rows = read_csv(out / "metrics.csv")
    assert [r["step"] for r in rows] == ["2", "4"]
    assert list(rows[0]) == ["step", "objective", "mse", "psnr", "wall_ms"]
    assert (out / "checkpoint.bin").exists() and (out / "recon_step000002_001.pgm").exists()
    assert (out / "clean_000.pgm").exists() and (out / "degraded_001.pgm").exists()
    manifest = parse_config((out / "manifest.txt").read_text())
    assert manifest["hidden"] == 12 and manifest["lr"] == 1e-3


def test_train_zero_steps(tmp_path):
    code, out = run(tmp_path, "train", SMALL_TRAIN.replace("steps = 4", "steps = 0"))
    assert code == 0
    assert (out / "metrics.csv").read_text() == "step,objective,mse,psnr,wall_ms\n"
    cfg = build_config(parse_config(SMALL_TRAIN.replace("steps = 4", "steps = 0")))
    assert checkpoint_bytes(load_checkpoint(out / "checkpoint.bin")) == checkpoint_bytes(cli.make_network(cfg, 64))


@pytest.mark.parametrize("extra", ["", "strategy = conventional\n", "degrade = inpaint\n", "degrade = blur\n"])
def test_train_is_deterministic(extra, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    code1, out1 = run(tmp_path / "a", "train", SMALL_TRAIN + extra)
    code2, out2 = run(tmp_path / "b", "train", SMALL_TRAIN + extra)
    assert code1 == code2 == 0
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    for img in sorted(p.name for p in out1.glob("*.pgm")):
        assert (out1 / img).read_bytes() == (out2 / img).read_bytes()
    assert (out1 / "checkpoint.bin").read_bytes() == (out2 / "checkpoint.bin").read_bytes()


def test_train_single_precision(tmp_path):
    code, out = run(tmp_path, "train", SMALL_TRAIN, "--precision", "32")
    assert code == 0
    assert load_checkpoint(out / "checkpoint.bin").dtype == np.float32


def test_published_deblur_config_runs_at_reduced_budget(tmp_path):
    text = (CONFIGS / "deblur.conf").read_text() + "steps = 2\ndata_count = 4\ndata_val_count = 1\nimage_count = 0\n"
    code, out = run(tmp_path, "train", text, "--paper-scale")
    assert code == 0
    assert len(read_csv(out / "metrics.csv")) == 1
    net = load_checkpoint(out / "checkpoint.bin")
    assert net.input_dim == 784 and net.depth == 7


def identity_checkpoint(tmp_path, n=64):
    path = tmp_path / "identity.bin"
    save_checkpoint(path, build_perceptron(np.eye(n), np.zeros(n), Identity()))
    return path


def test_invert_identity_checkpoint_returns_observation(tmp_path):
    ckpt = identity_checkpoint(tmp_path)
    text = (f"task = invert\ncheckpoint = {ckpt}\ndata_size = 8\ndata_count = 4\ndata_val_count = 2\n"
            "invert_noise = 0.0\ninvert_alpha = 1e-7\ninvert_count = 2\ntau_x = 1.0\npdhg_tol = 1e-12\n"
            "pdhg_iters = 3000\n")
    code, out = run(tmp_path, "invert", text)
    assert code == 0
    rows = read_csv(out / "reconstructions.csv")
    assert len(rows) == 2 and all(float(r["psnr"]) > 60 for r in rows)
    assert len(read_csv(out / "trace.csv")) == 1
    assert (out / "inverted_001.pgm").exists() and (out / "truth_000.pgm").exists()


@pytest.mark.filterwarnings("ignore:primal-dual step sizes")
def test_invert_trained_encoder_is_deterministic(tmp_path):
    code, trained = run(tmp_path, "train", SMALL_TRAIN + "activation = relu\n")
    assert code == 0
    text = (f"task = invert\ncheckpoint = {trained / 'checkpoint.bin'}\ndata_size = 8\ndata_count = 4\n"
            "data_val_count = 2\ninvert_count = 2\nouter_iters = 5\npdhg_iters = 100\n")
    outs = []
    for sub in ("a", "b"):
        (tmp_path / sub).mkdir()
        code, out = run(tmp_path / sub, "invert", text)
        assert code == 0
        outs.append(out)
    for name in ("trace.csv", "reconstructions.csv", "inverted_000.pgm"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    trace = [float(r["objective"]) for r in read_csv(outs[0] / "trace.csv")]
    assert len(trace) == 5 and all(b <= a + 1e-10 for a, b in zip(trace, trace[1:]))


def test_bench_rows_and_gate(tmp_path, monkeypatch):
    text = "task = bench\nbench_layers = 1,2,4,8\nbench_repeat = 1\nbench_width = 8\nbench_batch = 4\n"
    code, out = run(tmp_path, "bench", text)
    assert code == 0
    for kind in ("forward", "backward", "lifted"):
        rows = read_csv(out / f"bench_{kind}.csv")
        assert [r["layers"] for r in rows] == ["1", "2", "4", "8"]
        assert list(rows[0]) == ["layers", "vectorised_ms", "non_vectorised_ms", "speedup"]
        assert all(float(r["speedup"]) > 0 for r in rows)
    assert run(tmp_path, "bench", text, "--precision", "32")[0] == 0

    real = cli.forward_sequential

    def broken(net, y):
        tr = real(net, y)
        return type(tr)(tr.u, tr.z, tr.output + 1e-9, tr.pre)

    monkeypatch.setattr(cli, "forward_sequential", broken)
    assert run(tmp_path, "bench", text)[0] == 3


def test_data_synth_reproducible(tmp_path):
    text = "task = data\ndata_count = 10\ndata_val_count = 0\ndata_size = 16\nseed = 7\n"
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    code_a, out_a = run(tmp_path / "a", "data", text)
    code_b, out_b = run(tmp_path / "b", "data", text)
    assert code_a == code_b == 0
    with np.load(out_a / "dataset.npz") as a, np.load(out_b / "dataset.npz") as b:
        assert a["images"].shape == (10, 256)
        assert a["images"].tobytes() == b["images"].tobytes()


def test_data_idx_fixture(tmp_path):
    from test_inverse_tasks import IMAGES_IDX, LABELS_IDX
    (tmp_path / "img.idx").write_bytes(IMAGES_IDX)
    (tmp_path / "lab.idx").write_bytes(LABELS_IDX)
    base = (f"task = data\ndata_source = mnist\ndata_images = {tmp_path / 'img.idx'}\n"
            f"data_labels = {tmp_path / 'lab.idx'}\ndata_val_count = 0\n")
    code, out = run(tmp_path, "data", base + "data_count = 2\n")
    assert code == 0
    with np.load(out / "dataset.npz") as d:
        assert sorted(map(tuple, d["images"])) == sorted([(0.0, 0.2, 0.4, 1.0), (1.0, 0.0, 0.0, 0.6)])
        assert list(d["shape"]) == [2, 2]
    assert run(tmp_path, "data", base + "data_count = 3\n")[0] == 1
    (tmp_path / "img.idx").write_bytes(IMAGES_IDX[:-2])
    assert run(tmp_path, "data", base + "data_count = 2\n")[0] == 2


# Exit codes


def test_exit_codes(tmp_path, capsys):
    assert run(tmp_path, "train", "colour = red\n")[0] == 1
    assert run(tmp_path, "train", "task = bench\n")[0] == 1
    assert cli.main(["train", "--precision", "16"]) == 1
    assert cli.main(["fit"]) == 1
    assert cli.main(["train", "--config", str(tmp_path / "missing.conf")]) == 2
    assert run(tmp_path, "invert", "task = invert\n")[0] == 1
    assert run(tmp_path, "invert", f"task = invert\ncheckpoint = {tmp_path / 'none.bin'}\n")[0] == 2
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert run(tmp_path, "invert", f"task = invert\ncheckpoint = {bad}\n")[0] == 2
    assert "io error" in capsys.readouterr().err


def test_numerical_abort_exit_code(tmp_path):
    ckpt = identity_checkpoint(tmp_path, n=16)
    # a primal step far above the stability limit makes the input block blow up
    text = (f"task = invert\ncheckpoint = {ckpt}\ndata_size = 4\ndata_count = 2\ndata_val_count = 1\n"
            "invert_count = 1\ntau_x = 50.0\npdhg_iters = 200\n")
    with pytest.warns(UserWarning):
        assert run(tmp_path, "invert", text)[0] == 3
