"""Command-line surface.

Subcommands: synth (make data), train, eval, separate (component dumps),
bench (kernel/stage timings across backends). Options follow long-form
kebab-case; a line-based key=value config file can seed any command and
explicit flags win over it. Every command echoes its resolved configuration
so runs are reproducible from the log alone.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import cafs, data, kernels, metrics, model
from . import tensor as T
from . import trainer
from .data import RasterFormatError
from .tensor import NumericError, Tensor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _read_config_file(path):
    out = {}
    try:
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise CliError(f"{path}:{ln}: expected key=value, got {line!r}", EXIT_USAGE)
                key, val = line.split("=", 1)
                out[key.strip()] = val.strip()
    except OSError as e:
        raise CliError(f"cannot read config file: {e}", EXIT_USAGE)
    return out


_MODEL_KEYS = {
    "channels": int, "clusters": int, "window": int, "rank": int, "d": int,
    "heads": int, "dsr-stages": int, "ratio": int, "separator": str,
    "sfa-mode": str, "ncb": lambda s: s.lower() in ("1", "true", "yes"),
    "gating": lambda s: s.lower() in ("1", "true", "yes"),
    "global-skip": lambda s: s.lower() in ("1", "true", "yes"),
    "cluster-seed": int,
}
_TRAIN_KEYS = {
    "lr": float, "batch": int, "steps": int, "seed": int,
    "weight-decay": float, "stop-at-loss": float,
}


def _apply_file_config(args, path):
    """File values fill in argparse defaults; explicit flags win."""
    cfg = _read_config_file(path)
    known = dict(_MODEL_KEYS)
    known.update(_TRAIN_KEYS)
    for key, raw in cfg.items():
        if key not in known:
            raise CliError(f"unknown config key {key!r}", EXIT_USAGE)
        attr = key.replace("-", "_")
        if hasattr(args, attr) and attr not in args._explicit:
            setattr(args, attr, known[key](raw))
    return args


def _model_config(args):
    try:
        return model.ModelConfig(
            channels=args.channels, clusters=args.clusters, window=args.window,
            rank=args.rank, d=args.d, heads=args.heads,
            dsr_stages=args.dsr_stages, ratio=args.ratio,
            separator=args.separator, sfa_mode=args.sfa_mode, ncb=args.ncb,
            gating=args.gating, global_skip=args.global_skip,
            cluster_seed=args.cluster_seed)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE)


def _echo_config(name, mapping):
    print(f"# resolved {name} config")
    for k in sorted(mapping):
        print(f"{k}={mapping[k]}")


def _add_model_flags(p):
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--clusters", type=int, default=32)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--dsr-stages", type=int, default=2, choices=(0, 1, 2))
    p.add_argument("--ratio", type=int, default=4)
    p.add_argument("--separator", default="cluster", choices=model.SEPARATORS)
    p.add_argument("--sfa-mode", default="full", choices=sfa_modes())
    p.add_argument("--no-ncb", dest="ncb", action="store_false")
    p.add_argument("--no-gating", dest="gating", action="store_false")
    p.add_argument("--global-skip", action="store_true")
    p.add_argument("--cluster-seed", type=int, default=0)
    p.add_argument("--config", help="key=value config file; flags override")


def sfa_modes():
    from .sfa import SFA_MODES
    return SFA_MODES


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    for i in range(args.n):
        seed = args.seed + i
        gt = data.synth_scene(seed, args.size, args.channels)
        pair = data.wald_degrade(gt, args.ratio, args.blur_sigma)
        name = f"scene{i:03d}"
        files = {"gt": f"{name}_gt.msr", "pan": f"{name}_pan.msr",
                 "lrms": f"{name}_lrms.msr"}
        data.write_raster(os.path.join(args.out_dir, files["gt"]), pair.gt)
        data.write_raster(os.path.join(args.out_dir, files["pan"]), pair.pan)
        data.write_raster(os.path.join(args.out_dir, files["lrms"]), pair.lrms)
        rows.append({"name": name, "seed": seed, **files})
    data.write_manifest(os.path.join(args.out_dir, "manifest.tsv"), rows)
    _echo_config("synth", {"out_dir": args.out_dir, "n": args.n, "size": args.size,
                           "channels": args.channels, "ratio": args.ratio,
                           "blur_sigma": args.blur_sigma, "seed": args.seed})
    print(f"wrote {3 * args.n} rasters + manifest to {args.out_dir}")
    return EXIT_OK


def cmd_train(args):
    if args.config:
        _apply_file_config(args, args.config)
    mcfg = _model_config(args)
    tcfg = trainer.TrainConfig(lr=args.lr, batch=args.batch, steps=args.steps,
                               seed=args.seed, weight_decay=args.weight_decay,
                               stop_at_loss=args.stop_at_loss)
    try:
        pairs = data.load_dataset(args.data_dir, require_gt=True)
    except (OSError, ValueError, RasterFormatError) as e:
        raise CliError(f"dataset: {e}", EXIT_DATA)
    _echo_config("model", mcfg.to_dict())
    _echo_config("train", tcfg.to_dict())
    params = model.init_model_params(mcfg, tcfg.seed)
    log_path = args.log or (args.out + ".log")
    records = []

    def log(rec):
        records.append(rec)
        if args.verbose or rec["step"] % 25 == 0:
            print(f"step {rec['step']} loss {rec['loss']:.5f} "
                  f"grad_norm {rec['grad_norm']:.4f} wall_ms {rec['wall_ms']:.0f}")

    records = trainer.train_loop(pairs, params, mcfg, tcfg, log)
    trainer.save_checkpoint(args.out, params,
                            {"model": mcfg.to_dict(), "train": tcfg.to_dict()})
    trainer.write_log(log_path, records)
    final = records[-1]["loss"] if records else float("nan")
    print(f"checkpoint {args.out} after {len(records)} steps, final loss {final:.5f}")
    return EXIT_OK


def cmd_eval(args):
    try:
        params, mcfg = trainer.load_model(args.checkpoint)
    except (OSError, trainer.CheckpointError) as e:
        raise CliError(f"checkpoint: {e}", EXIT_DATA)
    try:
        pairs = data.load_dataset(args.data_dir, require_gt=(args.mode == "reduced"))
    except (OSError, ValueError, RasterFormatError) as e:
        raise CliError(f"dataset: {e}", EXIT_DATA)
    _echo_config("model", mcfg.to_dict())
    _echo_config("eval", {"checkpoint": args.checkpoint, "data_dir": args.data_dir,
                          "mode": args.mode,
                          "clusters_override": args.clusters_override or "-"})
    k_values = [int(s) for s in args.clusters_override.split(",")] if args.clusters_override else [None]
    for k in k_values:
        rows = []
        names = []
        for pair in pairs:
            static = model.make_static(mcfg, pair, clusters=k)
            cfg_k = mcfg if k is None else model.ModelConfig(
                **{**mcfg.to_dict(), "clusters": k})
            with T.no_grad():
                out = model.forward(params, cfg_k, pair, static=static)
            pred = np.clip(out.data.transpose(1, 2, 0), 0.0, 1.0)
            if args.mode == "reduced":
                rows.append(metrics.reduced_metrics(pred, pair.gt.pixels, pair.ratio))
            else:
                rows.append(metrics.full_metrics(pred, pair.pan.pixels, pair.lrms.pixels))
            names.append(pair.name or "sample")
        label = f"K={k}" if k is not None else f"K={mcfg.clusters}"
        print(f"## {args.mode} metrics ({label})")
        print(metrics.format_report(names, rows))
    return EXIT_OK


def cmd_separate(args):
    os.makedirs(args.out_dir, exist_ok=True)
    try:
        img = data.read_raster(args.input)
    except (OSError, RasterFormatError) as e:
        raise CliError(f"input: {e}", EXIT_DATA)
    chw = img.chw()
    if args.baseline:
        high, low = cafs.baseline_separate(img.pixels, args.baseline)
        cmap = None
        label = args.baseline
    else:
        if not args.checkpoint:
            raise CliError("separate needs --checkpoint or --baseline", EXIT_USAGE)
        params, mcfg = trainer.load_model(args.checkpoint)
        branch = "cafs.ms" if img.channels == mcfg.channels else "cafs.pan"
        if img.channels not in (1, mcfg.channels):
            raise CliError(
                f"raster has {img.channels} bands; checkpoint handles 1 or {mcfg.channels}",
                EXIT_DATA)
        k = args.clusters or mcfg.clusters
        with T.no_grad():
            pair_t, cmap = cafs.can_separate(Tensor(chw), params, branch,
                                             mcfg.window, k, mcfg.rank,
                                             mcfg.cluster_seed)
        high = pair_t.high.data.transpose(1, 2, 0).astype(np.float64)
        low = pair_t.low.data.transpose(1, 2, 0).astype(np.float64)
        label = f"cluster(K={k})"
    resid = float(np.abs(high + low - img.pixels.astype(np.float64)).max())

    def dump(tag, comp):
        # components can be negative; shift into [0,1] around 0.5 for viewing
        vis = np.clip(comp + 0.5, 0.0, 1.0) if tag == "high" else np.clip(comp, 0.0, 1.0)
        rgb = vis[:, :, :3] if vis.shape[2] >= 3 else np.repeat(vis[:, :, :1], 3, axis=2)
        data.write_ppm(os.path.join(args.out_dir, f"{tag}.ppm"), rgb)

    dump("high", high)
    dump("low", low)
    if cmap is not None:
        data.write_palette_pgm(os.path.join(args.out_dir, "clusters.pgm"),
                               cmap.indices, cmap.k)
    _echo_config("separate", {"input": args.input, "separator": label,
                              "out_dir": args.out_dir})
    print(f"max |high+low-input| = {resid:.3g}")
    if resid > 1e-5:
        raise CliError(f"reconstruction residual {resid:.3g} exceeds 1e-5", EXIT_NUMERIC)
    return EXIT_OK


def cmd_bench(args):
    sizes = [int(s) for s in args.sizes.split(",")]
    backends = ["numpy"] if kernels.fast is None else ["numba", "numpy"]
    print(f"# stage timings, sizes {sizes}, backends {backends}")
    print("backend\tsize\tstage\twall_ms\tops")
    for size in sizes:
        img = data.synth_scene(0, size, 4)
        chw = img.chw()
        feats = cafs.window_features(img.pixels, 3).reshape(size * size, 4)
        for bk in backends:
            impl = kernels.by_name(bk)
            rows = []
            impl.im2col(chw, 3, 3, 1, 1, 1)  # jit warm-up
            t0 = time.perf_counter()
            cols = impl.im2col(chw, 3, 3, 1, 1, 1)
            rows.append(("unfold", (time.perf_counter() - t0) * 1000,
                         int(cols.size)))
            t0 = time.perf_counter()
            labels, cents, trace = cafs.kmeans(feats, 8, seed=0)
            rows.append(("kmeans", (time.perf_counter() - t0) * 1000,
                         int(len(trace) * feats.shape[0] * 8)))
            rng = np.random.default_rng(0)
            cents_t = Tensor(rng.standard_normal((8, 36)).astype(np.float32))
            params = cafs.init_branch_params(np.random.default_rng(0), 4, 3, 4)
            mlp_params = {f"b.{k}": v for k, v in params.items()}
            t0 = time.perf_counter()
            bank = cafs.generate_filters(cents_t, mlp_params, "b", 4, 4)
            rows.append(("filtergen", (time.perf_counter() - t0) * 1000,
                         int(bank.size)))
            heads, hd = 8, 4
            tok = size * size
            q = rng.standard_normal((heads, tok, hd)).astype(np.float32)
            kk = rng.standard_normal((heads, tok, hd)).astype(np.float32)
            vv = rng.standard_normal((heads, tok, hd)).astype(np.float32)
            impl.attention_forward(q[:, :8], kk[:, :8], vv[:, :8], 0.5, False)
            t0 = time.perf_counter()
            impl.attention_forward(q, kk, vv, 0.5, False)
            rows.append(("attention", (time.perf_counter() - t0) * 1000,
                         int(heads * tok * tok)))
            for stage, ms, ops in rows:
                print(f"{bk}\t{size}\t{stage}\t{ms:.2f}\t{ops}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


class _TrackingParser(argparse.ArgumentParser):
    """Records which dests the user set explicitly (so config files only
    fill defaults)."""

    def parse_args(self, argv=None, namespace=None):
        ns = super().parse_args(argv, namespace)
        explicit = set()
        argv = sys.argv[1:] if argv is None else argv
        for action in self._subcmd_actions():
            for opt in action.option_strings:
                if any(a == opt or a.startswith(opt + "=") for a in argv):
                    explicit.add(action.dest)
        ns._explicit = explicit
        return ns

    def _subcmd_actions(self):
        acts = list(self._actions)
        for a in self._actions:
            if isinstance(a, argparse._SubParsersAction):
                for sub in a.choices.values():
                    acts.extend(sub._actions)
        return acts


def build_parser():
    p = _TrackingParser(prog="panfuse",
                        description="cluster-adaptive frequency pansharpening")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate synthetic scenes + degraded pairs")
    ps.add_argument("--out-dir", required=True)
    ps.add_argument("--n", type=int, default=4)
    ps.add_argument("--size", type=int, default=64)
    ps.add_argument("--channels", type=int, default=4, choices=(4, 8))
    ps.add_argument("--ratio", type=int, default=4)
    ps.add_argument("--blur-sigma", type=float, default=1.0)
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(fn=cmd_synth)

    pt = sub.add_parser("train", help="train a model on a synth dataset")
    pt.add_argument("--data-dir", required=True)
    pt.add_argument("--out", required=True, help="checkpoint path")
    pt.add_argument("--log", help="train log path (default: <out>.log)")
    pt.add_argument("--lr", type=float, default=6e-4)
    pt.add_argument("--batch", type=int, default=4)
    pt.add_argument("--steps", type=int, default=300)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--weight-decay", type=float, default=0.01)
    pt.add_argument("--stop-at-loss", type=float, default=None)
    pt.add_argument("--verbose", action="store_true")
    _add_model_flags(pt)
    pt.set_defaults(fn=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data-dir", required=True)
    pe.add_argument("--mode", choices=("reduced", "full"), default="reduced")
    pe.add_argument("--clusters-override",
                    help="comma list of K values; one metrics block per K")
    pe.set_defaults(fn=cmd_eval)

    pp = sub.add_parser("separate", help="dump high/low components for a raster")
    pp.add_argument("--input", required=True)
    pp.add_argument("--out-dir", required=True)
    pp.add_argument("--checkpoint")
    pp.add_argument("--baseline", choices=cafs.BASELINE_KINDS)
    pp.add_argument("--clusters", type=int)
    pp.set_defaults(fn=cmd_separate)

    pb = sub.add_parser("bench", help="per-stage kernel timings")
    pb.add_argument("--sizes", default="64,128")
    pb.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (RasterFormatError, trainer.CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
