"""Command-line runner: ``liftnet {train,invert,bench,data}``.

Exit codes: 0 success, 1 configuration error, 2 I/O error (including
malformed data or checkpoint files), 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .architectures import backprop_grad, forward_block, forward_sequential, lifted_forward, random_mlp
from .config import ConfigError, RunConfig, bench_layer_counts, build_config, parse_config, serialize_config
from .inverse_tasks import (Blur, IdxError, ImageDataset, Inpaint, Noise, degrade_dataset, load_mnist_idx,
                            psnr_batch, synth_dataset)
from .inversion import InversionProblem, encoder_layers, invert
from .io import CheckpointError, load_checkpoint, save_checkpoint, write_csv, write_pgm
from .optimizers import BregmanTrainConfig, ConventionalTrainConfig, train_conventional, train_lifted_bregman
from .prox import parse_activation

logger = logging.getLogger("liftnet")

METRIC_COLUMNS = ("step", "objective", "mse", "psnr", "wall_ms")
BENCH_COLUMNS = ("layers", "vectorised_ms", "non_vectorised_ms", "speedup")


class NumericalAbort(RuntimeError):
    pass


# Shared pieces


def load_dataset(cfg: RunConfig) -> ImageDataset:
    if cfg.data_source == "mnist":
        try:
            return load_mnist_idx(cfg.data_images, cfg.data_labels or None, cfg.data_count, cfg.seed,
                                  cfg.data_val_count)
        except IdxError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return synth_dataset(cfg.data_count, cfg.data_size, rng=cfg.seed, n_val=cfg.data_val_count)


def degradation(cfg: RunConfig):
    if cfg.degrade == "noise":
        return Noise(cfg.noise_sigma)
    if cfg.degrade == "blur":
        return Blur(cfg.blur_size, cfg.blur_sigma, cfg.noise_sigma)
    return Inpaint(cfg.inpaint_drop, cfg.seed, cfg.noise_sigma)


def make_network(cfg: RunConfig, n: int):
    """MLP ``n -> hidden -> ... -> n`` with an identity readout."""
    dims = [n] + [cfg.hidden] * (cfg.layers - 1) + [n]
    act = parse_activation(cfg.activation)
    net = random_mlp(dims, n, act, np.random.default_rng(cfg.seed), scale=cfg.init_scale)
    net = net.with_params({"K": np.eye(n)}).with_learnable(
        [k for k in net.learnable if k not in ("K", "d")])
    return net.astype(np.float32 if cfg.precision == 32 else np.float64)


def _prepare_out(out: Path, cfg: RunConfig):
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(serialize_config(cfg))


def _save_images(out: Path, prefix: str, images: np.ndarray, shape):
    for i, img in enumerate(images):
        write_pgm(out / f"{prefix}_{i:03d}.pgm", img.reshape(shape))


# Subcommands


def cmd_train(cfg: RunConfig, out: Path) -> int:
    """Train a denoising/deblurring/inpainting MLP and write metrics, images and a checkpoint."""
    _prepare_out(out, cfg)
    ds = load_dataset(cfg)
    train, val = ds.part("train"), ds.part("val")
    if len(val) == 0:
        val = train
    spec = degradation(cfg)
    Ytr = degrade_dataset(spec, train.images, ds.shape, 2 * cfg.seed)
    Yva = degrade_dataset(spec, val.images, ds.shape, 2 * cfg.seed + 1)
    net = make_network(cfg, train.images.shape[1])
    shown = min(cfg.image_count, len(val))
    mse_at = {}

    def monitor(step, cur, aux):
        rec = forward_block(cur, Ytr).output
        mse_at[step] = float(np.mean((rec - train.images) ** 2))
        out_val = forward_block(cur, Yva).output
        if cfg.image_every and step % cfg.image_every == 0 and shown:
            _save_images(out, f"recon_step{step:06d}", out_val[:shown], ds.shape)
        return float(np.median(psnr_batch(out_val, val.images)))

    if cfg.strategy == "bregman":
        tc = BregmanTrainConfig(steps=cfg.steps, variant=cfg.variant, alpha=cfg.lr, beta=cfg.lr_aux,
                                momentum=cfg.momentum, mu=cfg.mu, aux_init=cfg.aux_init, p1=cfg.p1,
                                p2=cfg.p2, eps=cfg.eps, record_every=cfg.record_every, seed=cfg.seed)
        result = train_lifted_bregman(net, Ytr, train.images, tc, callback=monitor)
    else:
        tc = ConventionalTrainConfig(steps=cfg.steps, lr=cfg.lr, p1=cfg.p1, p2=cfg.p2, eps=cfg.eps,
                                     record_every=cfg.record_every, seed=cfg.seed)
        result = train_conventional(net, Ytr, train.images, tc, callback=monitor)
    rows = [{"step": m["step"], "objective": m["objective"], "mse": mse_at[m["step"]], "psnr": m["psnr"],
             "wall_ms": m["wall_ms"] if cfg.record_wall_time else float("nan")}
            for m in result.metrics if m["step"] >= 1]
    write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    save_checkpoint(out / "checkpoint.bin", result.net)
    if shown:
        _save_images(out, "clean", val.images[:shown], ds.shape)
        _save_images(out, "degraded", Yva[:shown], ds.shape)
        _save_images(out, "recon", forward_block(result.net, Yva[:shown]).output, ds.shape)
    if not all(np.isfinite(m["objective"]) for m in result.metrics):
        raise NumericalAbort("training objective became non-finite")
    if rows:
        logger.info("final objective %.6g, median validation PSNR %.3f dB", rows[-1]["objective"],
                    rows[-1]["psnr"])
    return 0


def _geometry(cfg: RunConfig, n: int) -> tuple[int, int]:
    if cfg.data_size**2 == n:
        return (cfg.data_size, cfg.data_size)
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ConfigError(f"encoder input of size {n} is not a square image")
    return (side, side)


def cmd_invert(cfg: RunConfig, out: Path) -> int:
    """Recover encoder inputs from noisy encoder outputs."""
    if not cfg.checkpoint:
        raise ConfigError("checkpoint is required for invert")
    _prepare_out(out, cfg)
    net = load_checkpoint(cfg.checkpoint).astype(np.float64)
    shape = _geometry(cfg, net.input_dim)
    ds = load_dataset(cfg.replace(data_size=shape[0]) if cfg.data_source == "synth" else cfg)
    pool = ds.part("val") if len(ds.part("val")) else ds
    x_true = pool.images[:cfg.invert_count]
    if x_true.shape[1] != net.input_dim:
        raise ConfigError("dataset images do not match the encoder input size")
    y_clean = forward_block(net, x_true).output
    rng = np.random.default_rng(cfg.seed)
    y = y_clean + cfg.invert_noise * rng.standard_normal(y_clean.shape)
    problem = InversionProblem(encoder_layers(net), y, shape, cfg.invert_alpha,
                               tau_x=cfg.tau_x or None, tau_z=cfg.tau_z or None, pdhg_iters=cfg.pdhg_iters,
                               pdhg_tol=cfg.pdhg_tol, outer_iters=cfg.outer_iters)
    result = invert(problem)
    write_csv(out / "trace.csv", ("iteration", "objective"),
              [{"iteration": i + 1, "objective": v} for i, v in enumerate(result.objective)])
    scores = psnr_batch(result.x, x_true)
    write_csv(out / "reconstructions.csv", ("image", "mse", "psnr"),
              [{"image": i, "mse": float(np.mean((result.x[i] - x_true[i]) ** 2)), "psnr": float(p)}
               for i, p in enumerate(scores)])
    _save_images(out, "truth", x_true, shape)
    _save_images(out, "inverted", result.x, shape)
    if result.status != "ok":
        raise NumericalAbort(f"inversion aborted: {result.status}")
    logger.info("inverted %d images, median PSNR %.3f dB", len(x_true), float(np.median(scores)))
    return 0


def _median_ms(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def _row(layers, vec_ms, seq_ms):
    return {"layers": layers, "vectorised_ms": vec_ms, "non_vectorised_ms": seq_ms,
            "speedup": seq_ms / vec_ms if vec_ms > 0 else float("nan")}


def bench_rows(cfg: RunConfig) -> dict[str, list[dict]]:
    """Timings per layer count; any disagreement between the two paths raises ``NumericalAbort``."""
    dt = np.float32 if cfg.precision == 32 else np.float64
    act = parse_activation(cfg.activation)
    rows = {"forward": [], "backward": [], "lifted": []}
    for J in bench_layer_counts(cfg):
        rng = np.random.default_rng([cfg.seed, J])
        w = cfg.bench_width
        net = random_mlp([w] * (J + 1), w, act, rng, dtype=dt, bias_scale=0.1)
        x = rng.standard_normal((cfg.bench_batch, w)).astype(dt)
        target = rng.standard_normal((cfg.bench_batch, w)).astype(dt)
        blk, seq = forward_block(net, x), forward_sequential(net, x)
        if not (np.array_equal(blk.output, seq.output) and np.array_equal(blk.u, seq.u)):
            raise NumericalAbort(f"forward paths disagree at {J} layers")
        gb = backprop_grad(net, x, target, order="block")[1]
        gs = backprop_grad(net, x, target, order="sequential")[1]
        tol = 1e-4 if dt == np.float32 else 1e-10
        for k in gs:
            if not np.allclose(gb[k], gs[k], rtol=tol, atol=tol * max(1.0, float(np.abs(gs[k]).max()))):
                raise NumericalAbort(f"backward paths disagree on {k} at {J} layers")
        lv, ls = lifted_forward(net, blk.u, True), lifted_forward(net, blk.u, False)
        if not np.allclose(lv, ls, rtol=tol, atol=tol):
            raise NumericalAbort(f"lifted evaluations disagree at {J} layers")
        r = cfg.bench_repeat
        rows["forward"].append(_row(J, _median_ms(lambda: forward_block(net, x), r),
                                    _median_ms(lambda: forward_sequential(net, x), r)))
        rows["backward"].append(_row(J, _median_ms(lambda: backprop_grad(net, x, target, order="block"), r),
                                     _median_ms(lambda: backprop_grad(net, x, target, order="sequential"), r)))
        rows["lifted"].append(_row(J, _median_ms(lambda: lifted_forward(net, blk.u, True), r),
                                   _median_ms(lambda: lifted_forward(net, blk.u, False), r)))
    return rows


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    """Block versus layer-by-layer timings, written as bench_{forward,backward,lifted}.csv."""
    _prepare_out(out, cfg)
    for name, rows in bench_rows(cfg).items():
        write_csv(out / f"bench_{name}.csv", BENCH_COLUMNS, rows)
    return 0


def cmd_data(cfg: RunConfig, out: Path) -> int:
    """Load or synthesise the dataset and cache it as ``dataset.npz``."""
    _prepare_out(out, cfg)
    ds = load_dataset(cfg)
    labels = ds.labels if ds.labels is not None else np.zeros(0, dtype=int)
    with open(out / "dataset.npz", "wb") as fh:
        np.savez(fh, images=ds.images, split=ds.split, shape=np.array(ds.shape), labels=labels)
    logger.info("cached %d images of shape %s", len(ds), ds.shape)
    return 0


COMMANDS = {"train": cmd_train, "invert": cmd_invert, "bench": cmd_bench, "data": cmd_data}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="liftnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", type=Path, help="key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help=f"output directory (default runs/{name})")
        p.add_argument("--paper-scale", action="store_true", help="use the published experiment sizes")
        p.add_argument("--precision", type=int, choices=(32, 64))
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        values = parse_config(args.config.read_text()) if args.config is not None else {}
        if values.setdefault("task", args.command) != args.command:
            raise ConfigError(f"config is for task {values['task']!r}, not {args.command!r}")
        for key in ("seed", "precision"):
            if getattr(args, key) is not None:
                values[key] = getattr(args, key)
        cfg = build_config(values, args.paper_scale)
        out = args.out or Path("runs") / args.command
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, IdxError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except (NumericalAbort, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
