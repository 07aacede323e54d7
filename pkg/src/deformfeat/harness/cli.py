"""Command line: ``deformfeat {train,extract,match,eval,flops}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..complexity import CostQuery, comparison_table, dmh_cost, sddh_cost

# torch-backed modules are imported inside the commands that need them, so
# `flops` starts without loading torch

log = logging.getLogger("deformfeat")


def _detection(args):
    from ..dkd import DetectionConfig

    return DetectionConfig(radius=args.radius, score_threshold=args.threshold, top_k=args.top_k, t_det=args.t_det)


def _add_detection_args(p):
    p.add_argument("--threshold", type=float, default=0.2, help="score threshold")
    p.add_argument("--top-k", type=int, default=5000)
    p.add_argument("--radius", type=int, default=2, help="NMS radius")
    p.add_argument("--t-det", type=float, default=0.1, help="soft-argmax temperature")


def _expectations(args) -> dict:
    """Model fields a ``--config`` file pins; the checkpoint must agree."""
    if not getattr(args, "config", None):
        return {}
    from .config import load_config

    cfg = load_config(args.config)
    return {"variant": cfg.net.variant, "dim": cfg.net.dim, "K": cfg.K, "M": cfg.M}


def cmd_train(args) -> int:
    from .config import load_config
    from .data import ingest
    from .train import train

    cfg = load_config(args.config)
    data = ingest(args.data) if args.data else None
    res = train(cfg, data, out_dir=args.out)
    print(f"trained {cfg.steps} steps; final total loss {res.log[-1]['total']:.6f}")
    print(f"checkpoint: {res.checkpoint}\nloss log: {res.loss_csv}")
    return 0


def cmd_extract(args) -> int:
    import numpy as np

    from ..descriptors import DescriptorFile, write_descriptor_file
    from .checkpoint import load_checkpoint
    from .data import read_image
    from .evaluate import extract_features

    model = load_checkpoint(args.ckpt, expect=_expectations(args))
    img = read_image(args.image)
    f = extract_features(model, img, _detection(args))
    out = DescriptorFile(f.positions, f.scores, f.descriptors.astype(np.float32),
                         model.net_cfg.variant, model.sddh_cfg.M, model.sddh_cfg.K, f.pad)
    write_descriptor_file(args.out, out)
    print(f"{len(f.positions)} keypoints -> {args.out}")
    return 0


def cmd_match(args) -> int:
    from .. import evalbench as eb
    from ..descriptors import read_descriptor_file

    a, b = read_descriptor_file(args.a), read_descriptor_file(args.b)
    if a.descriptors.shape[1] != b.descriptors.shape[1]:
        raise SystemExit(f"descriptor sizes differ: {a.descriptors.shape[1]} vs {b.descriptors.shape[1]}")
    m = eb.mnn_match(a.descriptors, b.descriptors)
    with open(args.out, "w") as f:
        f.write("# index_A index_B similarity x_A y_A x_B y_B\n")
        for (i, j), s in zip(m.pairs, m.similarity):
            xa, ya = a.positions[i]
            xb, yb = b.positions[j]
            f.write(f"{i} {j} {s:.6f} {xa:.4f} {ya:.4f} {xb:.4f} {yb:.4f}\n")
    print(f"{len(m)} mutual matches -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .. import evalbench as eb
    from .checkpoint import load_checkpoint
    from .data import ingest
    from .evaluate import dataset_eval_pairs, evaluate, synthetic_eval_pairs

    model = load_checkpoint(args.ckpt, expect=_expectations(args))
    if args.dataset.startswith("synthetic:"):
        n = int(args.dataset.split(":", 1)[1])
        pairs = synthetic_eval_pairs(n, args.size, args.seed)
    else:
        pairs = dataset_eval_pairs(ingest(args.dataset))
    if not pairs:
        raise SystemExit(f"no evaluable pairs in {args.dataset}")
    reports = evaluate(model, pairs, _detection(args), th=args.th)
    names = [p.name for p in pairs]
    doc = eb.write_report(args.report, reports, names)
    print(eb.format_table(reports, names))
    print(json.dumps(doc["aggregate"]))
    return 0


def cmd_flops(args) -> int:
    q = CostQuery(H=args.H, W=args.W, C=args.C, K=args.K, M=args.M, N=args.N)
    if args.json:
        print(json.dumps({"query": vars(q), "DMH": dmh_cost(q).to_dict(), "SDDH": sddh_cost(q).to_dict()}, indent=2))
    else:
        print(comparison_table(q))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deformfeat", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", default="run", help="output directory (loss.csv, checkpoints)")
    p.add_argument("--data", help="dataset root; procedural synthetic pairs when omitted")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write keypoints and descriptors of one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="training config the checkpoint must match")
    _add_detection_args(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("match", help="mutual nearest-neighbour matching of two descriptor files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="homography benchmark")
    p.add_argument("--dataset", required=True, help="dataset root, or synthetic:N")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--config", help="training config the checkpoint must match")
    p.add_argument("--th", type=float, default=3.0, help="pixel threshold")
    p.add_argument("--size", type=int, default=64, help="image size for synthetic:N")
    p.add_argument("--seed", type=int, default=1, help="seed for synthetic:N")
    _add_detection_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="operation counts of the dense and sparse descriptor heads")
    for name in ("H", "W", "C", "K", "M", "N"):
        p.add_argument(f"--{name}", type=int, required=name != "M")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_flops)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "command", None) == "flops" and args.M is None:
        args.M = args.K * args.K
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as e:  # CheckpointError is a ValueError
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
