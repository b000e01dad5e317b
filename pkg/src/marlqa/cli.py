"""Command line entry point: ``marlqa <subcommand>`` or ``python -m marlqa``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import policy as P
from . import retriever as R
from . import trainer as T
from .kb import KBError
from .params import LayoutError, NonFiniteError, ParameterVector
from .taskgen import (Dataset, GenConfig, GenerationError, bfs_annotate, generate_dataset,
                      read_kv, write_kv)

log = logging.getLogger("marlqa")


def _config(path) -> T.RunConfig:
    return T.RunConfig.load(path) if path else T.RunConfig()


def _splits(cfg, data_dir):
    return T.prepare_data(cfg, Dataset.load(data_dir))


def _run_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args):
    cfg = GenConfig.from_kv(read_kv(args.config)) if args.config else GenConfig()
    data = generate_dataset(cfg, args.seed)
    out = _run_dir(args.out)
    data.save(out)
    write_kv(out / "gen.cfg", cfg.to_kv())
    print(f"wrote {len(data)} questions over {len(data.kb)} triples to {out}")


def cmd_annotate(args):
    data = Dataset.load(args.data)
    out, missing, lengths = [], 0, []
    for q in data:
        ann = bfs_annotate(q, data.kb, args.max_len)
        if ann is None:
            missing += 1
        else:
            lengths.append(len(ann))
        out.append(replace(q, pseudo_gold=ann))
    Dataset(data.kb, out, data.vocab).save(_run_dir(args.out))
    mean = sum(lengths) / len(lengths) if lengths else float("nan")
    print(f"annotated {len(lengths)}/{len(data)} questions, mean length {mean:.2f}, "
          f"{missing} without a program of length <= {args.max_len}")


def cmd_pretrain(args):
    cfg = _config(args.config)
    sp = _splits(cfg, args.data)
    out = _run_dir(args.out)
    cfg.save(out / "run.cfg")
    lg = T.TrainLog()
    pc = cfg.policy_config(len(sp.train.vocab))
    theta0 = P.init_params(pc, T.derive_rng(cfg.seed, "theta-init"))
    theta = T.pretrain(sp.annotated, theta0, cfg, sp.valid, lg)
    theta.save(out / "theta.json")
    lg.write(out / "log.jsonl")
    print(f"pretrained on {len(sp.annotated)} annotated questions -> {out / 'theta.json'}")


def cmd_train_vanilla(args):
    cfg = _config(args.config)
    sp = _splits(cfg, args.data)
    out = _run_dir(args.out)
    cfg.save(out / "run.cfg")
    lg = T.TrainLog()
    theta = T.vanilla_rl(ParameterVector.load(args.ckpt), sp.unannotated, cfg, sp.valid, lg)
    theta.save(out / "theta.json")
    lg.write(out / "log.jsonl")
    print(f"vanilla RL on {len(sp.unannotated)} questions -> {out / 'theta.json'}")


def cmd_train_marl(args):
    cfg = _config(args.config)
    if args.retriever:
        cfg = replace(cfg, retriever=args.retriever)
    sp = _splits(cfg, args.data)
    out = _run_dir(args.out)
    cfg.save(out / "run.cfg")
    theta0 = ParameterVector.load(args.ckpt)
    phi0 = ParameterVector.load(args.phi) if args.phi else None
    theta, phi, lg = T.train_marl(cfg, sp, theta0, phi0, run_dir=out, resume=args.resume)
    theta.save(out / "theta.json")
    if phi is not None:
        phi.save(out / "phi.json")
    lg.write(out / "log.jsonl")
    last = [r for r in lg.records if r["stage"] == "marl"]
    print(f"{cfg.retriever} meta-training stopped after {len(last)} epochs; "
          f"best validation micro F1 {max(r['valid_micro'] for r in lg.records):.4f}")


def cmd_eval(args):
    cfg = _config(args.config)
    cfg = replace(cfg, beam_width=args.beam)
    theta = ParameterVector.load(args.ckpt)
    data = Dataset.load(args.data)
    if args.split == "all":
        target, pool_data = data, data
    else:
        sp = T.prepare_data(cfg, data)
        target, pool_data = getattr(sp, args.split), sp.train
    kind = args.retriever
    phi = None
    if kind == "learned":
        if not args.phi:
            raise SystemExit("--retriever learned needs --phi")
        phi = ParameterVector.load(args.phi)
    report = T.evaluate_arm(theta, phi, kind, target, R.CandidatePool(pool_data), cfg, "eval")
    print(report.table())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_json(detail=True), indent=2))


def cmd_ablate(args):
    cfg = _config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = T.ablate(cfg, seeds, workers=args.workers)
    out = _run_dir(args.out)
    cfg.save(out / "run.cfg")
    (out / "ablation.json").write_text(json.dumps(result.to_json(), indent=2, sort_keys=True))
    (out / "table.txt").write_text(result.table() + "\n")
    print(result.table())
    for seed, m in result.per_seed_violations():
        print(f"seed {seed}: ordering violated " +
              ", ".join(f"{a}={100 * v:.2f}" for a, v in m.items()))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="marlqa", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic KB and question set")
    p.add_argument("--config", help="generator key = value file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("annotate", help="BFS pseudo-gold annotation of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=5)
    p.set_defaults(func=cmd_annotate)

    for name, func, needs_ckpt in (("pretrain", cmd_pretrain, False),
                                   ("train-vanilla", cmd_train_vanilla, True),
                                   ("train-marl", cmd_train_marl, True)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="run key = value file")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        if needs_ckpt:
            p.add_argument("--ckpt", required=True, help="programmer checkpoint to start from")
        if name == "train-marl":
            p.add_argument("--retriever", choices=T.RETRIEVER_KINDS)
            p.add_argument("--phi", help="retriever checkpoint to start from")
            p.add_argument("--resume", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="beam-decode a split and report F1")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--config")
    p.add_argument("--split", choices=("test", "valid", "train", "all"), default="test")
    p.add_argument("--retriever", choices=T.RETRIEVER_KINDS,
                   help="adapt on retrieved support questions before decoding")
    p.add_argument("--phi")
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="vanilla / random / jaccard / marl over several seeds")
    p.add_argument("--config")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except (T.TrainingAborted, NonFiniteError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2
    except (GenerationError, KBError, LayoutError, R.RetrievalError, KeyError,
            ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
