"""Single entry point exposing the pipeline as subcommands.

Config precedence is defaults < --config file < explicit flags. Every
artifact-producing subcommand writes a RunManifest JSON next to its output
(resolved config, seed, input/output hashes) so a run can be replayed.
Progress logs are JSON lines on stderr. Exit codes: 0 success, 1 usage
error, 2 contract or numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import corpus as corpus_mod
from .checkpoint import file_sha256
from .drafter import DraftConfig, DraftModel
from .engine import spec_decode
from .errors import BlockspecError, ConfigError
from .target import TargetConfig, TargetModel, train_target
from .trainer import TrainConfig, train_drafter

ARTIFACT_VERSION = 1


def log(**fields):
    print(json.dumps(fields, sort_keys=True), file=sys.stderr)


def write_manifest(out_path, subcommand: str, config: dict, seed: int, inputs: dict[str, str]):
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "input_hashes": {k: file_sha256(v) for k, v in inputs.items() if Path(v).exists()},
        "output_hash": file_sha256(out_path) if Path(out_path).exists() else None,
        "artifact_version": ARTIFACT_VERSION,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    Path(str(out_path) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def resolve_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags (flags parsed with None
    defaults so absence is detectable)."""
    cfg = dict(defaults)
    path = getattr(args, "config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"bad config file {path}: {e}")
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def load_prompts(path) -> list[list[int]]:
    prompts = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                prompts.append([int(t) for t in json.loads(line)["prompt"]])
    if not prompts:
        raise ConfigError(f"no prompts in {path}")
    return prompts


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args, {"task": "mixture", "seed": 0, "count": 1000})
    vocab = corpus_mod.Vocab()
    if cfg["task"] == "mixture":
        samples = corpus_mod.gen_mixture(cfg["seed"], cfg["count"], vocab)
    else:
        samples = corpus_mod.gen_task(cfg["task"], cfg["seed"], cfg["count"], vocab)
    corpus_mod.save_jsonl(samples, args.out)
    write_manifest(args.out, "gen-data", cfg, cfg["seed"], {})
    log(event="gen_data_done", count=len(samples), out=str(args.out))
    return 0


def cmd_distill(args) -> int:
    cfg = resolve_config(args, {"max_new": 64})
    target = TargetModel.load(args.target)
    samples = corpus_mod.load_jsonl(getattr(args, "in_file"))
    distilled = corpus_mod.distill_responses(samples, target, cfg["max_new"])
    corpus_mod.save_jsonl(distilled, args.out)
    write_manifest(args.out, "distill", cfg, 0, {"target": args.target, "in": getattr(args, "in_file")})
    log(event="distill_done", kept=len(distilled), dropped=len(samples) - len(distilled))
    return 0


def cmd_train_target(args) -> int:
    cfg = resolve_config(
        args,
        {"layers": 12, "d_model": 128, "heads": 4, "epochs": 3, "lr": 1e-3, "batch_size": 32, "seed": 0},
    )
    samples = corpus_mod.load_jsonl(args.corpus)
    tcfg = TargetConfig(n_layers=cfg["layers"], d_model=cfg["d_model"], n_heads=cfg["heads"])
    model = train_target(
        samples,
        tcfg,
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        log_fn=lambda m: log(event="train_target", **m),
    )
    model.save(args.out)
    write_manifest(args.out, "train-target", cfg, cfg["seed"], {"corpus": args.corpus})
    return 0


def cmd_train_draft(args) -> int:
    cfg = resolve_config(
        args,
        {
            "block_size": 8,
            "layers": 5,
            "n_feat": 5,
            "anchors": 32,
            "decay_gamma": None,
            "feature_mode": "online",
            "epochs": 6,
            "lr": 6e-4,
            "batch_size": 8,
            "seed": 0,
            "no_conditioning": False,
        },
    )
    target = TargetModel.load(args.target)
    samples = corpus_mod.load_jsonl(args.corpus)
    dcfg = DraftConfig(
        n_layers=cfg["layers"],
        d_model=target.config.d_model,
        n_heads=target.config.n_heads,
        block_size=cfg["block_size"],
        n_feat=cfg["n_feat"],
        conditioning=not cfg["no_conditioning"],
    )
    drafter = DraftModel(dcfg, target, seed=cfg["seed"] + 1)
    tcfg = TrainConfig(
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        anchors_per_seq=cfg["anchors"],
        block_size=cfg["block_size"],
        decay_gamma=cfg["decay_gamma"],
        feature_mode=cfg["feature_mode"],
        feature_cache_path=str(args.out) + ".features" if cfg["feature_mode"] == "offline" else None,
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
    )
    metrics = train_drafter(
        samples, target, drafter, tcfg, log_fn=lambda m: log(event="train_draft", **m)
    )
    drafter.save(args.out)
    if args.metrics_out:
        with open(args.metrics_out, "w") as f:
            for entry in metrics:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
    write_manifest(args.out, "train-draft", cfg, cfg["seed"], {"corpus": args.corpus, "target": args.target})
    return 0


def cmd_decode(args) -> int:
    cfg = resolve_config(
        args,
        {"block_size": 8, "temperature": 1.0, "seed": 0, "max_new": 64, "mode": "greedy"},
    )
    target = TargetModel.load(args.target)
    drafter = DraftModel.load(args.draft, target)
    prompts = load_prompts(args.prompt_file)
    agg = None
    for prompt in prompts:
        tokens, metrics = spec_decode(
            prompt,
            target,
            drafter,
            block_size=cfg["block_size"],
            mode=cfg["mode"],
            temperature=cfg["temperature"],
            max_new=cfg["max_new"],
            seed=cfg["seed"],
        )
        print(json.dumps({"prompt": prompt, "tokens": tokens}))
        if agg is None:
            agg = metrics
        else:
            agg.cycles += metrics.cycles
            agg.total_accepted += metrics.total_accepted
            agg.tokens_emitted += metrics.tokens_emitted
            agg.tau_values.extend(metrics.tau_values)
            agg.draft_s += metrics.draft_s
            agg.verify_s += metrics.verify_s
            agg.fuse_s += metrics.fuse_s
    if args.metrics_out and agg is not None:
        Path(args.metrics_out).write_text(json.dumps(agg.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args, {"seeds": 1, "max_new": 48})
    matrix = json.loads(Path(args.matrix).read_text())
    target = TargetModel.load(matrix["target"])
    pspec = matrix.get("prompts", {"task": "mixture", "seed": 99, "count": 8})
    if pspec["task"] == "mixture":
        prompt_samples = corpus_mod.gen_mixture(pspec["seed"], pspec["count"])
    else:
        prompt_samples = corpus_mod.gen_task(pspec["task"], pspec["seed"], pspec["count"])
    prompts = [s.prompt for s in prompt_samples]
    cases = []
    for case in matrix["cases"]:
        for seed in range(cfg["seeds"]):
            entry = {"name": f"{case['name']}@seed{seed}", "block_size": case["block_size"], "seed": seed}
            path = case.get("draft")
            if path and Path(path).exists():
                entry["drafter"] = DraftModel.load(path, target)
            else:
                entry["drafter"] = None
                entry["reason"] = f"missing checkpoint {path}"
            cases.append(entry)
    rows, timings = [], []
    for entry in cases:
        if entry["drafter"] is None:
            rows.append(bench_mod.skipped_row(entry["name"], entry["reason"]))
            continue
        row, timing = bench_mod.run_case(
            entry["name"], target, entry["drafter"], prompts, entry["block_size"],
            max_new=cfg["max_new"], seed=entry["seed"],
        )
        rows.append(row)
        timings.append(timing)
        log(event="bench_case", name=entry["name"], mean_tau=row["mean_tau"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench_mod.write_report_csv(out / "report.csv", rows)
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    write_manifest(out / "report.csv", "bench", cfg, 0, {"matrix": args.matrix})
    return 0


def cmd_report(args) -> int:
    md = bench_mod.csv_to_markdown(args.csv)
    if args.out:
        Path(args.out).write_text(md)
    else:
        print(md, end="")
    return 0


def cmd_selftest(args) -> int:
    """Fast end-to-end checks: greedy losslessness on tiny untrained models
    and cell-by-cell attention-mask rule verification."""
    from .target import select_tap_layers
    from .trainer import build_block_mask

    vocab = corpus_mod.Vocab()
    tcfg = TargetConfig(n_layers=6, d_model=32, n_heads=4, vocab=vocab, max_seq=256)
    target = TargetModel(tcfg, seed=3)
    target.freeze()
    failures = 0

    for conditioning in (True, False):
        dcfg = DraftConfig(
            n_layers=2, d_model=32, n_heads=4, block_size=5, n_feat=2, conditioning=conditioning
        )
        drafter = DraftModel(dcfg, target, seed=5)
        drafter.freeze()
        samples = corpus_mod.gen_mixture(11, 6, vocab)
        for s in samples:
            ref = target.ar_decode(s.prompt, max_new=24)
            got, _ = spec_decode(s.prompt, target, drafter, block_size=5, max_new=24)
            if ref != got:
                failures += 1
                log(event="selftest_fail", check="greedy_lossless", conditioning=conditioning)

    rng = np.random.default_rng(0)
    for _ in range(20):
        nb = int(rng.integers(1, 5))
        bsize = int(rng.integers(2, 9))
        clen = int(rng.integers(0, 12))
        anchors = np.sort(rng.choice(np.arange(1, 40), size=nb, replace=False))
        mask = build_block_mask(anchors, bsize, clen)
        for row in range(nb * bsize):
            b = row // bsize
            for col in range(clen + nb * bsize):
                if col < clen:
                    expect = col <= anchors[b]  # positions 0..clen-1
                else:
                    expect = (col - clen) // bsize == b
                if bool(mask.allowed[row, col]) != expect:
                    failures += 1
                    log(event="selftest_fail", check="mask_rule", row=row, col=col)
    taps = select_tap_layers(12, 5)
    if list(taps.layer_indices) != [2, 4, 6, 8, 10]:
        failures += 1
        log(event="selftest_fail", check="tap_selection")
    log(event="selftest_done", failures=failures)
    return 0 if failures == 0 else 2


# ---------------------------------------------------------------------------
# Parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockspec", description=__doc__)
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (defaults < file < flags)")

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(g)
    g.add_argument("--task", choices=["copy_repeat", "modular_chain", "pattern_grammar", "mixture"])
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    d = sub.add_parser("distill", help="replace responses with target greedy continuations")
    common(d)
    d.add_argument("--target", required=True)
    d.add_argument("--in", dest="in_file", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--max-new", dest="max_new", type=int)
    d.set_defaults(fn=cmd_distill)

    tt = sub.add_parser("train-target", help="train the autoregressive target")
    common(tt)
    tt.add_argument("--corpus", required=True)
    tt.add_argument("--out", required=True)
    tt.add_argument("--layers", type=int)
    tt.add_argument("--d-model", dest="d_model", type=int)
    tt.add_argument("--heads", type=int)
    tt.add_argument("--epochs", type=int)
    tt.add_argument("--lr", type=float)
    tt.add_argument("--batch-size", dest="batch_size", type=int)
    tt.add_argument("--seed", type=int)
    tt.set_defaults(fn=cmd_train_target)

    td = sub.add_parser("train-draft", help="train the block drafter against a frozen target")
    common(td)
    td.add_argument("--corpus", required=True)
    td.add_argument("--target", required=True)
    td.add_argument("--out", required=True)
    td.add_argument("--block-size", dest="block_size", type=int)
    td.add_argument("--layers", type=int)
    td.add_argument("--n-feat", dest="n_feat", type=int)
    td.add_argument("--anchors", type=int)
    td.add_argument("--decay-gamma", dest="decay_gamma", type=float)
    td.add_argument("--feature-mode", dest="feature_mode", choices=["online", "offline"])
    td.add_argument("--epochs", type=int)
    td.add_argument("--lr", type=float)
    td.add_argument("--batch-size", dest="batch_size", type=int)
    td.add_argument("--seed", type=int)
    td.add_argument("--no-conditioning", dest="no_conditioning", action="store_const", const=True)
    td.add_argument("--metrics-out", dest="metrics_out")
    td.set_defaults(fn=cmd_train_draft)

    dec = sub.add_parser("decode", help="speculative decoding over a prompt file")
    common(dec)
    dec.add_argument("--target", required=True)
    dec.add_argument("--draft", required=True)
    dec.add_argument("--prompt-file", dest="prompt_file", required=True)
    dec.add_argument("--block-size", dest="block_size", type=int)
    dec.add_argument("--temperature", type=float)
    dec.add_argument("--mode", choices=["greedy", "sample"])
    dec.add_argument("--seed", type=int)
    dec.add_argument("--max-new", dest="max_new", type=int)
    dec.add_argument("--metrics-out", dest="metrics_out")
    dec.set_defaults(fn=cmd_decode)

    b = sub.add_parser("bench", help="run the benchmark matrix")
    common(b)
    b.add_argument("--matrix", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", type=int)
    b.add_argument("--max-new", dest="max_new", type=int)
    b.set_defaults(fn=cmd_bench)

    r = sub.add_parser("report", help="render a report CSV as markdown")
    common(r)
    r.add_argument("--csv", required=True)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)

    st = sub.add_parser("selftest", help="fast correctness checks on fixed seeds")
    common(st)
    st.set_defaults(fn=cmd_selftest)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help
        return 0 if e.code == 0 else 1
    try:
        return args.fn(args)
    except BlockspecError as e:
        log(event="error", kind=type(e).__name__, message=str(e))
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
