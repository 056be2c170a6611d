"""
Command-line entry point: synth, train, eval, infer, gradcheck, config-dump.

Exit codes: 0 success, 1 numeric or check failure, 2 usage or config
error, 3 I/O or format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import datakit, gradcheck, nets, trainer
from .autodiff import ContractError, ShapeError, SpecError
from .datakit import GenConfig, synth_dataset
from .losses import IGNORE_LABEL, DataError
from .metrics import DepthMetricsReport, SegMetricsReport
from .nets import HybridNet, ModelConfig
from .runtime import worker_count
from .trainer import TrainConfig

log = logging.getLogger("hybridnet")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

DEPTH_ROWS = (
    ("γ < 1.25", "delta1"),
    ("γ < 1.25^2", "delta2"),
    ("γ < 1.25^3", "delta3"),
    ("ARD", "ard"),
    ("SRD", "srd"),
    ("RMSE-linear", "rmse_linear"),
    ("RMSE-log", "rmse_log"),
    ("SIE", "sie"),
)
SEG_ROWS = (("G", "global_acc"), ("C", "class_acc"), ("IoUclass", "mean_iou"))


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Flat run configuration; every key here is accepted in a JSON config file."""
    # model
    input_h: int = 64
    input_w: int = 128
    num_classes: int = 5
    feature_channels: list = field(default_factory=lambda: [16, 32, 64])
    aspp_rates: list = field(default_factory=lambda: [1, 2, 4])
    aspp_channels: int = 64
    global_channels: list = field(default_factory=lambda: [16, 16, 32, 32])
    global_fc_dim: int = 128
    refine_channels: int = 32
    model_seed: int = 0
    # training
    alpha: float = 1000.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    reduction: str = "mean"
    train_seed: int = 0
    log_every: int = 10
    lr_depth: float = 3e-4
    lr_seg: float = 1e-2
    lr_hybrid: float = 7e-6
    iters_depth: int = 500
    iters_seg: int = 500
    iters_hybrid: int = 2000
    # synthetic data
    objects_min: int = 2
    objects_max: int = 4
    depth_near: float = 2.0
    depth_far: float = 10.0
    ignore_border: int = 2
    ignore_label: int = IGNORE_LABEL
    gen_seed: int = 0
    # evaluation and paths
    tiles: str | None = None
    split: str | None = None
    data_dir: str | None = None

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def update(self, doc: dict):
        unknown = sorted(set(doc) - set(self.keys()))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in doc.items():
            setattr(self, k, _checked(k, v, getattr(RunConfig(), k)))
        return self

    def to_dict(self):
        return {k: getattr(self, k) for k in self.keys()}

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_h=self.input_h, input_w=self.input_w, num_classes=self.num_classes,
            feature_channels=list(self.feature_channels), aspp_rates=list(self.aspp_rates),
            aspp_channels=self.aspp_channels, global_channels=list(self.global_channels),
            global_fc_dim=self.global_fc_dim, refine_channels=self.refine_channels, seed=self.model_seed)

    def train_config(self, stage: str) -> TrainConfig:
        if stage not in trainer.STAGES:
            raise UsageError(f"stage must be one of {', '.join(trainer.STAGES)}")
        return TrainConfig(
            alpha=self.alpha, lr=getattr(self, f"lr_{stage}"), momentum=self.momentum,
            weight_decay=self.weight_decay, iterations=getattr(self, f"iters_{stage}"), seed=self.train_seed,
            stage=stage, reduction=self.reduction, log_every=self.log_every, ignore_label=self.ignore_label)

    def gen_config(self, h=None, w=None) -> GenConfig:
        return GenConfig(h=h or self.input_h, w=w or self.input_w, num_classes=self.num_classes,
                         objects_min=self.objects_min, objects_max=self.objects_max,
                         depth_near=self.depth_near, depth_far=self.depth_far,
                         ignore_border=self.ignore_border, ignore_label=self.ignore_label, seed=self.gen_seed)

    def tile_grid(self):
        return parse_tiles(self.tiles)


def _checked(key, value, default):
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and isinstance(default, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = value is None or isinstance(value, str)
    if not ok:
        raise UsageError(f"config key {key!r}: bad value {value!r}")
    return value


def parse_tiles(text):
    if text in (None, "", "none"):
        return None
    try:
        r, c = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise UsageError(f"tiles must look like RxC, got {text!r}") from None
    if r < 1 or c < 1:
        raise UsageError(f"tiles must be positive, got {text!r}")
    return r, c


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_run_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        cfg.update(doc)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg.update({key.strip(): _parse_value(raw)})
    return cfg


# ---------------------------------------------------------------------------
# reports

def build_report(depth: DepthMetricsReport, seg: SegMetricsReport, **meta) -> dict:
    return {
        **meta,
        "depth": {name: getattr(depth, attr) for name, attr in DEPTH_ROWS},
        "segmentation": {**{name: getattr(seg, attr) for name, attr in SEG_ROWS},
                         "per_class_iou": seg.per_class_iou},
    }


def parse_report(text: str) -> tuple[DepthMetricsReport, SegMetricsReport]:
    doc = json.loads(text)
    depth = DepthMetricsReport(**{attr: doc["depth"][name] for name, attr in DEPTH_ROWS})
    seg = SegMetricsReport(**{attr: doc["segmentation"][name] for name, attr in SEG_ROWS},
                           per_class_iou=doc["segmentation"]["per_class_iou"])
    return depth, seg


def format_table(report: dict) -> str:
    rows = [(name, v) for name, v in report["depth"].items()]
    rows += [(name, v) for name, v in report["segmentation"].items() if name != "per_class_iou"]
    width = max(len(n) for n, _ in rows)
    lines = [f"{'metric'.ljust(width)}  value"]
    lines += [f"{n.ljust(width)}  {v:.6f}" for n, v in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands

def _dataset_dir(cfg: RunConfig, data_dir) -> Path:
    base = data_dir or cfg.data_dir
    if not base:
        raise UsageError("no data directory given")
    d = Path(base)
    if cfg.split:
        d = d / cfg.split
    if not (d / datakit.MANIFEST).is_file():
        raise UsageError(f"{d}: not a dataset directory (no {datakit.MANIFEST})")
    return d


def cmd_synth(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        cfg.gen_seed = args.seed
    if args.count < 0:
        raise UsageError("count must be >= 0")
    gen = cfg.gen_config(args.height, args.width)
    samples = synth_dataset(gen, args.count)
    for s in samples:
        s.validate(gen.num_classes, gen.ignore_label)
    datakit.write_dataset(args.out_dir, samples)
    print(f"wrote {len(samples)} samples to {args.out_dir}")
    return EXIT_OK


def _initial_model(args, cfg: RunConfig) -> HybridNet:
    if args.init and (args.init_depth or args.init_seg):
        raise UsageError("--init cannot be combined with --init-depth/--init-seg")
    if bool(args.init_depth) != bool(args.init_seg):
        raise UsageError("--init-depth and --init-seg must be given together")
    if args.init_depth:
        merged = trainer.merge_checkpoints(trainer.load_checkpoint(args.init_depth),
                                           trainer.load_checkpoint(args.init_seg))
        return merged.to_model()
    if args.init:
        return trainer.load_checkpoint(args.init).to_model()
    return HybridNet(cfg.model_config())


def cmd_train(args, cfg: RunConfig) -> int:
    tcfg = cfg.train_config(args.stage)
    tcfg.validate()
    dataset = datakit.read_dataset(_dataset_dir(cfg, args.data))
    model = _initial_model(args, cfg)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_log(entry):
            fh.write(entry.line() + "\n")
            fh.flush()
            log.info(entry.line())
        result = trainer.train_stage(model, dataset, tcfg, on_log=on_log)
    trainer.save_checkpoint(result.checkpoint, args.out)
    last = result.log[-1].losses
    print(f"stage {args.stage}: {tcfg.iterations} iterations, final l_h {last.l_h!r}; wrote {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.tiles is not None:
        cfg.tiles = args.tiles
    tiles = cfg.tile_grid()
    dataset = datakit.read_dataset(_dataset_dir(cfg, args.data))
    if args.gt_as_prediction:
        model, num_classes = None, cfg.num_classes
    else:
        if not args.ckpt:
            raise UsageError("--ckpt is required unless --gt-as-prediction is set")
        model = trainer.load_checkpoint(args.ckpt).to_model()
        num_classes = model.cfg.num_classes
    depth, seg = trainer.evaluate(model, dataset, tiles, num_classes=num_classes,
                                  ignore_label=cfg.ignore_label, oracle=args.gt_as_prediction)
    report = build_report(depth, seg, split=cfg.split, tiles=cfg.tiles, images=len(dataset),
                          checkpoint=None if args.gt_as_prediction else str(args.ckpt))
    text = json.dumps(report, indent=2, ensure_ascii=False) + "\n"
    table = format_table(report)
    if args.report:
        out = Path(args.report)
        out.write_text(text, encoding="utf-8")
        out.with_suffix(".txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    if args.tiles is not None:
        cfg.tiles = args.tiles
    model = trainer.load_checkpoint(args.ckpt).to_model()
    rgb = datakit.read_ppm(args.image)
    depth, scores = trainer.predict(model, rgb, cfg.tile_grid())
    datakit.write_dmap(args.depth_out, depth)
    datakit.write_pgm(args.labels_out, scores.argmax(axis=0))
    print(f"wrote {args.depth_out} and {args.labels_out} ({rgb.shape[1]}×{rgb.shape[2]})")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    scopes = gradcheck.SCOPES if args.scope == "all" else (args.scope,)
    ok = True
    for scope in scopes:
        for r in gradcheck.run_scope(scope, samples_per_param=args.samples):
            status = "ok" if r.ok else "FAIL"
            extra = f"  ({r.skipped} kink probes skipped)" if r.skipped else ""
            print(f"{status:4s} {scope:6s} {r.target:32s} {r.error:.3e} < {r.threshold:.0e}{extra}")
            ok &= r.ok
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_config_dump(args, cfg: RunConfig) -> int:
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridnet", description="Joint depth and segmentation at desk scale.")
    p.add_argument("--config", help="JSON run configuration (flat keys; see config-dump)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (value parsed as JSON when possible)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("out_dir")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--seed", type=int)
    s.add_argument("--height", type=int, help="defaults to the model input height")
    s.add_argument("--width", type=int, help="defaults to the model input width")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one stage and write a checkpoint")
    t.add_argument("--stage", required=True, choices=trainer.STAGES)
    t.add_argument("--data", help="dataset directory (overrides data_dir)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="loss log path (default: <out>.log)")
    t.add_argument("--init", help="start from this checkpoint")
    t.add_argument("--init-depth", help="depth-stage checkpoint to merge")
    t.add_argument("--init-seg", help="seg-stage checkpoint to merge")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--ckpt")
    e.add_argument("--data")
    e.add_argument("--tiles", help="RxC tiling grid, or none")
    e.add_argument("--report", help="JSON report path; a text table goes next to it as .txt")
    e.add_argument("--gt-as-prediction", action="store_true", help="score ground truth against itself")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict depth and labels for one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True, help="input PPM")
    i.add_argument("--depth-out", required=True, help="output DMAP")
    i.add_argument("--labels-out", required=True, help="output PGM")
    i.add_argument("--tiles")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="compare backward passes with finite differences")
    g.add_argument("--scope", choices=gradcheck.SCOPES + ("all",), default="all")
    g.add_argument("--samples", type=int, default=3, help="probed elements per model parameter tensor")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("config-dump", help="print the effective configuration")
    c.set_defaults(func=cmd_config_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        worker_count()
        cfg = load_run_config(args.config, args.set)
        return args.func(args, cfg)
    except (UsageError, nets.ConfigError, datakit.ConfigError, trainer.ConfigError, ShapeError, SpecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (datakit.FormatError, trainer.CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DataError, ContractError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # remaining value errors come from bad settings (e.g. HYBRIDNET_THREADS)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
