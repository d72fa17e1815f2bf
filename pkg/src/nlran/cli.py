"""Operator command line: synth / preprocess / train / eval / explain /
gradcheck / inspect.

Every subcommand is reproducible from its resolved config alone; --dry-run
prints the resolved config and touches nothing.  Exit codes: 0 ok, 1 usage
error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import explain as X
from . import metrics as M
from . import model as model_mod
from . import ops
from . import tensor as T
from . import train as trainer
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclasses.dataclass
class RunConfig:
    """Merged network + training + phantom configuration with defaults."""

    network: model_mod.NetworkConfig = dataclasses.field(
        default_factory=model_mod.NetworkConfig
    )
    train: trainer.TrainConfig = dataclasses.field(default_factory=trainer.TrainConfig)
    phantom: D.PhantomSpec = dataclasses.field(default_factory=D.PhantomSpec)
    target_slices: int = 16
    crop: tuple = (32, 32)
    split_seed: int = 0
    dtype: str = "float32"

    def to_dict(self):
        return {
            "network": dataclasses.asdict(self.network),
            "train": dataclasses.asdict(self.train),
            "phantom": dataclasses.asdict(self.phantom),
            "target_slices": self.target_slices,
            "crop": list(self.crop),
            "split_seed": self.split_seed,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, raw):
        sections = {
            "network": model_mod.NetworkConfig,
            "train": trainer.TrainConfig,
            "phantom": D.PhantomSpec,
        }
        scalars = {"target_slices", "crop", "split_seed", "dtype"}
        unknown = set(raw) - set(sections) - scalars
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, klass in sections.items():
            section = raw.get(name, {})
            allowed = {f.name for f in dataclasses.fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            kwargs[name] = klass(**section)
        for key in scalars:
            if key in raw:
                kwargs[key] = tuple(raw[key]) if key == "crop" else raw[key]
        return cls(**kwargs)


def load_config(path):
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def _np_dtype(name):
    if name not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {name!r}")
    return np.dtype(name)


def _run_dirs(out):
    out = Path(out)
    dirs = {
        name: out / name for name in ("checkpoints", "logs", "reports", "heatmaps")
    }
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return out, dirs


def _snapshot_config(cfg, out):
    with open(Path(out) / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)


def cmd_synth(args, cfg):
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    spec = cfg.phantom
    if args.count is not None:
        if args.count % len(D.LABELS) != 0:
            raise DataError(f"--count must be a multiple of {len(D.LABELS)}")
        spec = dataclasses.replace(spec, count_per_class=args.count // len(D.LABELS))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    volumes = D.generate_phantoms(spec)
    records = D.write_dataset(volumes, args.out)
    print(f"wrote {len(records)} phantoms to {args.out}")
    return EXIT_OK


def cmd_preprocess(args, cfg):
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    records = D.load_manifest(args.manifest)
    root = Path(args.manifest).parent
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    processed, failures = [], []
    for rec in records:
        try:
            v = D.load_volume(rec, root)
            v = D.preprocess(v, cfg.target_slices, cfg.crop)
        except (DataError, ShapeError, FormatError) as exc:
            print(f"FAIL {rec['id']}: {exc}", file=sys.stderr)
            failures.append(rec["id"])
            continue
        new_rec = {"id": v.scan_id, "path": f"{v.scan_id}.nlt", "label": v.label}
        D.save_array(out_dir / new_rec["path"], v.voxels)
        if v.lesion is not None:
            new_rec["lesion_path"] = f"{v.scan_id}.lesion.nlt"
            D.save_array(out_dir / new_rec["lesion_path"], v.lesion)
        if "split" in rec:
            new_rec["split"] = rec["split"]
        processed.append(new_rec)
    D.save_manifest(processed, out_dir / "manifest.jsonl")
    print(f"processed {len(processed)} scans, {len(failures)} failures")
    return EXIT_DATA if failures else EXIT_OK


def _load_split_volumes(manifest_path, split_seed):
    records = D.load_manifest(manifest_path)
    root = Path(manifest_path).parent
    if not all("split" in r for r in records):
        records = D.split(records, seed=split_seed)
    by_split = {"train": [], "val": [], "test": []}
    for rec in records:
        by_split[rec["split"]].append(D.load_volume(rec, root))
    return by_split


def cmd_train(args, cfg):
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    out, dirs = _run_dirs(args.out)
    _snapshot_config(cfg, out)
    splits = _load_split_volumes(args.manifest, cfg.split_seed)
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    model = model_mod.build(
        cfg.network, seed=train_cfg.seed, dtype=_np_dtype(cfg.dtype)
    )
    log, best_state = trainer.train(model, splits["train"], splits["val"], train_cfg)
    trainer.restore(model, best_state)
    ckpt = dirs["checkpoints"] / "best.nlck"
    model_mod.save_checkpoint(model, ckpt, epoch=log.best_epoch, best_metric=log.best_metric)
    log.write_jsonl(dirs["logs"] / "train.jsonl")
    print(
        f"best epoch {log.best_epoch} "
        f"({train_cfg.selection_metric}={log.best_metric:.4f}) -> {ckpt}"
    )
    return EXIT_OK


def cmd_eval(args, cfg):
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    out, dirs = _run_dirs(args.out)
    model, _ = model_mod.load_checkpoint(args.checkpoint)
    splits = _load_split_volumes(args.manifest, cfg.split_seed)
    volumes = splits[args.split]
    report, scores, cm = trainer.evaluate(model, volumes)
    report_path = dirs["reports"] / f"{args.split}_report.json"
    payload = json.loads(report.to_json())
    payload.update(
        ACC=report.accuracy,
        P=report.weighted_precision,
        R=report.weighted_recall,
        F1=report.weighted_f1,
        AUC=report.weighted_auc,
        confusion=cm.counts.tolist(),
    )
    with open(report_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    labels = np.array([v.label_index for v in volumes])
    for k, truth in enumerate(M.one_vs_rest(labels, model.cfg.num_classes)):
        for kind, fn in (("roc", M.roc_curve), ("pr", M.pr_curve)):
            try:
                curve = fn(scores[:, k], truth)
            except DataError:
                continue
            with open(dirs["reports"] / f"{args.split}_{kind}_class{k}.csv", "w") as fh:
                fh.write(curve.to_csv())
    print(f"ACC={report.accuracy:.4f} F1={report.weighted_f1:.4f} -> {report_path}")
    return EXIT_OK


def cmd_explain(args, cfg):
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    out, dirs = _run_dirs(args.out)
    model, _ = model_mod.load_checkpoint(args.checkpoint)
    records = D.load_manifest(args.manifest)
    root = Path(args.manifest).parent
    matching = [r for r in records if r["id"] == args.scan]
    if not matching:
        raise DataError(f"scan {args.scan!r} not found in manifest")
    volume = D.load_volume(matching[0], root)
    written = []
    if args.method in ("attention", "both"):
        h = X.attention_heatmap(model, volume)
        written += X.export_heatmap(h, dirs["heatmaps"] / volume.scan_id, "pgm-stack")
    if args.method in ("cam", "both"):
        logits = model.forward(T.Tensor(volume.voxels[None, None] / 255.0))
        target = int(logits.data.argmax())
        h = X.cam_heatmap(model, volume, target)
        written += X.export_heatmap(h, dirs["heatmaps"] / volume.scan_id, "pgm-stack")
    print(f"wrote {len(written)} heat-map slices for scan {volume.scan_id}")
    return EXIT_OK


def gradcheck_table():
    """(name, max relative error, threshold) rows for every differentiable op."""
    from . import modules as mod
    from .tensor import Tensor, finite_difference_check

    rng = np.random.default_rng(7)

    def rt(*shape):
        return Tensor(rng.uniform(-1.5, 1.5, shape), requires_grad=True)

    build = mod.Builder(seed=3, dtype=np.float64)
    rows = []

    def check(name, f, x, tol=1e-4):
        rows.append((name, finite_difference_check(f, x), tol))

    w = rt(3, 2, 3, 3, 3)
    check("conv3d/input", lambda x: T_sum(ops.conv3d(x, w, stride=2, padding=1)), rt(2, 2, 4, 5, 5))
    x_fixed = rt(1, 2, 4, 4, 4)
    check("conv3d/weight", lambda w_: T_sum(ops.conv3d(x_fixed, w_, padding=1)), rt(3, 2, 3, 3, 3))
    b = rt(3)
    check("conv3d/bias", lambda b_: T_sum(ops.conv3d(x_fixed, w, b_, padding=1)), b)
    # off-tie maxpool: distinct values almost surely under continuous sampling
    check("maxpool3d", lambda x: T_sum(ops.maxpool3d(x, 2, 2)), rt(1, 2, 4, 4, 4))
    check("upsample3d/nearest", lambda x: T_sum(ops.upsample3d(x, 2, "nearest")), rt(1, 2, 2, 3, 3))
    check("upsample3d/trilinear", lambda x: T_sum(ops.upsample3d(x, 2, "trilinear")), rt(1, 2, 2, 3, 3))
    check("mixed_attention", lambda x: T_sum(ops.mixed_attention_activation(x)), rt(1, 3, 2, 2, 2))
    check("channel_attention", lambda x: T_sum(ops.channel_attention_activation(x)), rt(1, 3, 2, 2, 2))
    check("spatial_attention", lambda x: T_sum(ops.spatial_attention_activation(x)), rt(1, 3, 2, 2, 2))
    check("global_average_pool", lambda x: T_sum(ops.global_average_pool(x)), rt(2, 3, 2, 2, 2))
    fw, fb = rt(4, 5), rt(4)
    check("fully_connected", lambda x: T_sum(ops.fully_connected(x, fw, fb)), rt(3, 5))
    labels = np.array([0, 2, 1])
    check("softmax_cross_entropy", lambda x: ops.softmax_cross_entropy(x, labels), rt(3, 3))
    att = mod.AttentionModule(4, build, down_steps=1)
    check("attention_module", lambda x: T_sum(att.forward(x)), rt(1, 4, 4, 4, 4))
    nl = mod.NonLocalBlock(4, build)
    nl.wz.weight.data[:] = build.rng.standard_normal(nl.wz.weight.shape) * 0.2
    check("nonlocal_block", lambda x: T_sum(nl.forward(x)), rt(1, 4, 2, 3, 3))
    return rows


def T_sum(t):
    from .tensor import tsum

    return tsum(t)


def cmd_gradcheck(args, cfg):
    started = time.perf_counter()
    rows = gradcheck_table()
    failed = 0
    for name, err, tol in rows:
        ok = err < tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:<24} {err:.3e} (tol {tol:g})")
    print(f"{len(rows) - failed}/{len(rows)} ops passed in {time.perf_counter() - started:.1f}s")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_inspect(args, cfg):
    model, header = model_mod.load_checkpoint(args.checkpoint)
    params = model_mod.count_params(model)
    flops = model_mod.count_flops(model)
    print(f"config: {json.dumps(header['config'], sort_keys=True)}")
    print(f"epoch: {header['epoch']}  best_metric: {header['best_metric']:.4f}")
    print(f"parameters: {params:,}")
    print(f"flops (batch-1 multiply-adds): {flops:,}")
    for name, shape in model.trace_shapes():
        print(f"  {name:<16} {shape}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="nlran", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=False, checkpoint=False, out=True):
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--dry-run", action="store_true")
        if out:
            p.add_argument("--out", type=Path, required=True)
        if manifest:
            p.add_argument("--manifest", type=Path, required=True)
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    common(p)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("preprocess", help="apply the preprocessing pipeline")
    common(p, manifest=True)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="train a model")
    common(p, manifest=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, manifest=True, checkpoint=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("explain", help="emit heat maps for one scan")
    common(p, manifest=True, checkpoint=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--method", choices=("attention", "cam", "both"), default="both")
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("gradcheck", help="finite-difference check every op")
    common(p, out=False)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect", help="parameter/FLOP summary of a checkpoint")
    common(p, checkpoint=True, out=False)
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
