"""Command-line entry point: ``snstitch <command> --config exp.toml --out runs/exp``."""
import argparse
import csv
import json
import logging
import os
import sys
from fractions import Fraction

from . import anchors as nn
from . import budget, dataio, evalbench, stitching, training
from .checkpoint import model_from_tensors, read_tensors, save_checkpoint, write_tensors
from .config import ConfigError, load_config
from .errors import FormatError, NumericalError
from .linalg import make_rng

EXIT_OK, EXIT_ERROR, EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3, 4

SMALL_CKPT, LARGE_CKPT = "small.snv2", "large.snv2"
SNNET_CKPT, SPACE_JSON = "snnet.snv2", "space.json"

log = logging.getLogger("snstitch")


class MissingArtifact(FileNotFoundError):
    pass


def _require(path, hint):
    if not os.path.exists(path):
        raise MissingArtifact(f"{path} not found; run `{hint}` first")
    return path


def load_data(cfg):
    """``(train, val)`` datasets for the experiment."""
    if cfg.data == "synthetic":
        return dataio.make_synthetic(cfg.task_spec(), training.sub_rng(cfg.seed, "data"))
    train = dataio.load_idx(cfg.train_images, cfg.train_labels, cfg.patch_size,
                            cfg.num_classes, "train")
    if cfg.val_images:
        val = dataio.load_idx(cfg.val_images, cfg.val_labels, cfg.patch_size,
                              cfg.num_classes, "val")
    else:
        n_val = int(round(len(train) * cfg.val_fraction))
        val = train.subset(slice(0, n_val))
        val.split = "val"
        train = train.subset(slice(n_val, None))
    if train.x.shape[1:] != (cfg.seq_len, cfg.patch_dim):
        raise ConfigError(
            f"IDX data gives {train.x.shape[1]} tokens of {train.x.shape[2]} values; "
            f"set seq_len and patch_dim to match")
    return train, val


def _cost(cfg):
    return budget.CostModel(cfg.small_spec(), cfg.large_spec(), cfg.count_crossing_flops)


def _distribution(cfg, space):
    cost = _cost(cfg)
    step = budget.auto_step(space, cost) if cfg.budget_step == "auto" else float(cfg.budget_step)
    return budget.build_distribution(space, cost, step)


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_anchors(cfg, out):
    small = model_from_tensors(read_tensors(_require(os.path.join(out, SMALL_CKPT), "pretrain")),
                               cfg.small_spec())
    large = model_from_tensors(read_tensors(_require(os.path.join(out, LARGE_CKPT), "pretrain")),
                               cfg.large_spec())
    return small, large


# -- commands ------------------------------------------------------------------

def cmd_pretrain(cfg, out, workers=1):
    train, val = load_data(cfg)
    tcfg = cfg.train_config(iterations=cfg.pretrain_iterations)
    records, accs = [], {}
    for which, spec in (("small", cfg.small_spec()), ("large", cfg.large_spec())):
        model = nn.init_anchor(spec, training.sub_rng(cfg.seed, f"init_{which}"))
        _, losses = training.pretrain_anchor(model, train, tcfg)
        records += [{"anchor": which, "iter": i, "loss": loss} for i, loss in enumerate(losses)]
        save_checkpoint(model, os.path.join(out, f"{which}.snv2"))
        accs[which] = evalbench.anchor_accuracy(model, val)
    _write_jsonl(os.path.join(out, "pretrain_log.jsonl"), records)
    return f"pretrained: small val_acc={accs['small']:.4f} large val_acc={accs['large']:.4f}"


def cmd_enumerate(cfg, out, workers=1):
    space = stitching.enumerate_space(cfg.small_spec(), cfg.large_spec(), cfg.mode)
    with open(os.path.join(out, SPACE_JSON), "w", encoding="utf-8") as f:
        json.dump(stitching.space_to_json(space), f, indent=1)
    return f"configs: {len(space)}"


def cmd_distribution(cfg, out, workers=1):
    space = stitching.enumerate_space(cfg.small_spec(), cfg.large_spec(), cfg.mode)
    dist = _distribution(cfg, space)
    with open(os.path.join(out, "distribution.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bin_flops", "count", "probability"])
        for b, p in zip(dist.bins, dist.probabilities()):
            writer.writerow([repr(b.tau0), len(b.members), repr(float(p))])
    with open(os.path.join(out, "distribution.svg"), "w", encoding="utf-8") as f:
        f.write(evalbench.histogram_svg(dist))
    return f"bins: {len(dist)} configs: {len(space)} step: {dist.step:.6g}"


def cmd_train(cfg, out, workers=1):
    small, large = _load_anchors(cfg, out)
    train, _ = load_data(cfg)
    space = stitching.enumerate_space(cfg.small_spec(), cfg.large_spec(), cfg.mode)
    dist = _distribution(cfg, space)
    records = training.train_snnet(space, small, large, train, cfg.train_config(), dist=dist)
    _write_jsonl(os.path.join(out, "train_log.jsonl"), records)
    tensors = {f"small.{k}": v for k, v in small.named_parameters()}
    tensors.update({f"large.{k}": v for k, v in large.named_parameters()})
    tensors.update(space.layer_tensors())
    write_tensors(os.path.join(out, SNNET_CKPT), tensors)
    with open(os.path.join(out, SPACE_JSON), "w", encoding="utf-8") as f:
        json.dump(stitching.space_to_json(space, container=SNNET_CKPT), f, indent=1)
    final = records[-1]["loss"] if records else float("nan")
    return f"trained: iterations={len(records)} configs={len(space)} final_loss={final:.4f}"


def load_trained(cfg, out):
    tensors = read_tensors(_require(os.path.join(out, SNNET_CKPT), "train"))
    with open(_require(os.path.join(out, SPACE_JSON), "train"), encoding="utf-8") as f:
        doc = json.load(f)
    space = stitching.space_from_json(doc, tensors)
    small = model_from_tensors(tensors, cfg.small_spec(), prefix="small.")
    large = model_from_tensors(tensors, cfg.large_spec(), prefix="large.")
    return space, small, large


def cmd_sweep(cfg, out, workers=1):
    space, small, large = load_trained(cfg, out)
    _, val = load_data(cfg)
    result = evalbench.sweep(space, small, large, val, _cost(cfg), workers=workers)
    evalbench.emit_curve(result, os.path.join(out, "sweep"))
    return f"swept: configs={len(result.rows)} pareto={sum(result.pareto_mask)}"


def cmd_sample_demo(cfg, out, workers=1, n_draws=10_000):
    space = stitching.enumerate_space(cfg.small_spec(), cfg.large_spec(), cfg.mode)
    dist = _distribution(cfg, space)
    anchor_ids = set(space.anchor_ids)
    ros_rng = training.sub_rng(cfg.seed, "sampler")
    uni_rng = make_rng([cfg.seed, 99])
    ros_hits = sum(budget.ros_sample(dist, ros_rng) in anchor_ids for _ in range(n_draws))
    uni_hits = sum(budget.uniform_sample(space, uni_rng) in anchor_ids for _ in range(n_draws))
    ros_exact = sum((dist.ros_probability(c) for c in anchor_ids), Fraction(0))
    report = {
        "configs": len(space),
        "bins": len(dist),
        "draws": n_draws,
        "ros_anchor_frequency": ros_hits / n_draws,
        "ros_anchor_probability": str(ros_exact),
        "uniform_anchor_frequency": uni_hits / n_draws,
        "uniform_anchor_probability": f"{len(anchor_ids)}/{len(space)}",
    }
    with open(os.path.join(out, "sample_demo.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    return (f"anchor frequency: ros={report['ros_anchor_frequency']:.4f} (exact {ros_exact}) "
            f"uniform={report['uniform_anchor_frequency']:.4f} "
            f"(exact {report['uniform_anchor_probability']}) bins={len(dist)} configs={len(space)}")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "enumerate": cmd_enumerate,
    "distribution": cmd_distribution,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "sample-demo": cmd_sample_demo,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment TOML file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="artifact directory")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                        help="evaluation threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="snstitch", parents=[common],
                                     description="Two-way model stitching experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "sample-demo":
            p.add_argument("--draws", type=int, default=10_000)
    return parser


def _fail(code, kind, message, **extra):
    payload = {"error": kind, "code": code, "message": message, **extra}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    opts = vars(args)
    logging.basicConfig(level=logging.DEBUG if opts.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = opts.get("out", "out")
    workers = opts.get("workers", 1)
    try:
        cfg = load_config(opts.get("config"))
        os.makedirs(out, exist_ok=True)
        kwargs = {"n_draws": args.draws} if args.command == "sample-demo" else {}
        summary = COMMANDS[args.command](cfg, out, workers=workers, **kwargs)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), line=exc.line, column=exc.column)
    except MissingArtifact as exc:
        return _fail(EXIT_MISSING, "missing_artifact", str(exc))
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, "numerical", str(exc))
    except (FormatError, OSError, ValueError) as exc:
        return _fail(EXIT_ERROR, type(exc).__name__, str(exc))
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
