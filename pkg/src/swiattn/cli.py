"""Command-line entry point: ``swiattn <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Every subcommand prints a one-line ``key=value`` summary on success. Failures print
a single ``error: <ErrorType>: <message>`` line to stderr and exit 1; argument
errors print usage and exit 2.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_model
from .config import load_config, resolve_seed
from .data import EOS, decode, encode
from .errors import ConfigError
from .inference import CostReport, InferenceSession, count_prefill_flops, mem_access_for_trace
from .selftest import run_selftest
from .telemetry import niah_sweep, route_stats, write_gates_csv
from .training import cpt_swiattn, eval_batches, evaluate_lm, pretrain_full

GATE_TRACES = ("all_full", "all_swa", "alternate")


def _fmt(**kv) -> str:
    return " ".join(f"{k}={round(v, 6)}" if isinstance(v, float) else f"{k}={v}" for k, v in kv.items())


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_pretrain_full(args, cfg) -> str:
    out = _outdir(args)
    result = pretrain_full(cfg.model.with_mode("full_only"), cfg.data, cfg.train, out, log_every=args.log_every)
    return _fmt(steps=len(result.history), final_lm_loss=result.history[-1]["lm_loss"],
                checkpoint=out / "donor.ckpt")


def cmd_cpt(args, cfg) -> str:
    out = _outdir(args)
    donor = load_checkpoint(args.donor)
    model_cfg = cfg.model.with_mode("swiattn")
    result = cpt_swiattn(donor, cfg.data, cfg.cpt, model_cfg, out, log_every=args.log_every)
    last = result.history[-1]
    return _fmt(steps=len(result.history), final_lm_loss=last["lm_loss"], full_ratio=last["full_ratio"],
                checkpoint=out / "swiattn.ckpt")


def cmd_eval_ppl(args, cfg) -> str:
    model = load_model(args.ckpt)
    batches = eval_batches(cfg.data, args.batches, cfg.train.batch_size, cfg.seed)
    nll = evaluate_lm(model, batches)
    return _fmt(lm_loss=nll, ppl=float(np.exp(nll)))


def cmd_generate(args, cfg) -> str:
    out = _outdir(args)
    model = load_model(args.ckpt)
    session = InferenceSession(model)
    new = session.generate(encode(args.prompt), args.max_new, stop_token=EOS)
    write_gates_csv(session.prefill_gate_log + session.gate_log, out / "gates.csv")
    session.cost.write_csv(out / "cost.csv")
    return _fmt(text=repr(decode(new)), new_tokens=len(new))


def cmd_niah(args, cfg) -> str:
    out = _outdir(args)
    model = load_model(args.ckpt)
    sweep = niah_sweep(model, cfg.niah["context_lengths"], cfg.niah["depths"], cfg.niah["repeats"], cfg.seed)
    write_gates_csv(sweep.records(), out / "gates.csv")
    with open(out / "niah.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["context_len", "depth_percent", "relation", "correct", "full_ratio"])
        for r in sweep.results:
            w.writerow([len(r.instance.tokens), r.instance.depth_percent, r.instance.window_relation,
                        int(r.correct), repr(r.full_ratio)])
    return _fmt(acc_inside=sweep.accuracy("inside"), acc_outside=sweep.accuracy("outside"),
                ratio_inside=sweep.ratio("inside"), ratio_outside=sweep.ratio("outside"))


def cmd_route_stats(args, cfg) -> str:
    out = _outdir(args)
    model = load_model(args.ckpt)
    rng = np.random.default_rng(cfg.seed)
    data = [cfg.data.sample(rng) for _ in range(args.sequences)]
    stats = route_stats(model, data)
    with open(out / "route_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "full_ratio", "tokens"])
        for i, (r, n) in enumerate(zip(stats.layer_full_ratio, stats.layer_counts)):
            w.writerow([i, repr(float(r)), int(n)])
    layers = ",".join(f"{r:.4f}" for r in stats.layer_full_ratio)
    return _fmt(overall=stats.overall, layers=layers)


def _trace(name: str, n_layers: int, T: int) -> np.ndarray:
    if name == "all_full":
        return np.ones((n_layers, T))
    if name == "all_swa":
        return np.zeros((n_layers, T))
    return np.tile((np.arange(n_layers) % 2 == 1).astype(float)[:, None], (1, T))


def cmd_cost(args, cfg) -> str:
    out = _outdir(args)
    mcfg = cfg.model
    T = args.pos
    gates = _trace(args.gates, mcfg.n_layers, T)
    report = CostReport(prefill_flops_by_position=count_prefill_flops(mcfg, T, gates))
    mem = mem_access_for_trace(gates[:, -1], T, mcfg.window)
    report.record_decode(T, [int(mem_access_for_trace(g, T, mcfg.window)) for g in gates[:, -1]])
    report.write_csv(out / "cost.csv")
    return _fmt(gates=args.gates, pos=T, mem_access=mem, prefill_gflops=float(report.prefill_gflops.sum()))


def cmd_selftest(args, cfg) -> str:
    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [n for n, ok, _ in results if not ok]
    if failed:
        raise SelftestFailure(",".join(failed))
    return _fmt(checks=len(results), failed=0)


class SelftestFailure(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="INI run config (see swiattn.config)")
    common.add_argument("--seed", type=int, default=None, help="overrides SWIATTN_SEED and the config seed")
    common.add_argument("--out", default="runs", help="output directory")

    parser = argparse.ArgumentParser(prog="swiattn", description="Routed full/sliding-window attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("pretrain-full", cmd_pretrain_full, "train a full-attention donor")
    p.add_argument("--log-every", type=int, default=0)
    p = add("cpt", cmd_cpt, "continual pretraining of a routed model from a donor")
    p.add_argument("--donor", required=True, help="full_only donor checkpoint")
    p.add_argument("--log-every", type=int, default=0)
    p = add("eval-ppl", cmd_eval_ppl, "mean next-token NLL and perplexity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--batches", type=int, default=8)
    p = add("generate", cmd_generate, "greedy generation with gate and cost logs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=16)
    p = add("niah", cmd_niah, "needle-in-a-haystack sweep")
    p.add_argument("--ckpt", required=True)
    p = add("route-stats", cmd_route_stats, "per-layer full-attention ratios")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sequences", type=int, default=32)
    p = add("cost", cmd_cost, "analytic prefill FLOPs and decode memory access")
    p.add_argument("--gates", choices=GATE_TRACES, default="all_full")
    p.add_argument("--pos", type=int, required=True, help="sequence length / decode position")
    add("selftest", cmd_selftest, "run the built-in invariant checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        if getattr(args, "pos", 1) < 1:
            raise ConfigError("--pos must be >= 1")
        cfg = load_config(args.config)
        cfg = cfg.with_seed(resolve_seed(args.seed, cfg.seed))
        print(args.fn(args, cfg))
    except Exception as exc:  # report every failure as one parsable line
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
