"""Command-line entry point for corpus synthesis, training, analysis,
editing, overlap-add resynthesis, and probing.

Every subcommand reads an optional JSON config (--config) with
--set section.key=value overrides, writes its outputs into --out, and
echoes the fully resolved config beside them. Runs are deterministic:
identical config and seeds reproduce byte-identical outputs. Exit codes:
0 success, 2 input or config error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as cfgmod
from .bsq import LATC_VERSION, read_codes, write_codes
from .corpus import (LATF_VERSION, build_corpus, load_corpus, read_features,
                     read_manifest, write_features, write_manifest)
from .editor import cyclic_pairs, edit_and_decode, read_edit_manifest, write_edit_manifest
from .errors import ConfigError, InputError, NumericError, SlotTokError
from .importance import (diagnostics, partition_from_labels, profile,
                         load_profile, save_curve, save_profile)
from .model import LATM_VERSION, load_checkpoint, save_checkpoint
from .ola import OlaConfig, resynthesize, tokenize_sequence
from .probe import accuracy_and_confusion, fit_probe, save_report, transfer_rate
from .trainer import fit, write_trace
from . import report


def _load_cfg(args) -> tuple[dict, dict]:
    """Resolved config plus the raw (pre-default) user document."""
    raw = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"cannot parse config {p}: {e}") from e
    if args.set:
        raw = cfgmod.apply_overrides(raw, args.set)
    return cfgmod.resolve(raw), raw


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ola_for_model(model, cfg: dict, raw: dict, seq_rate: float, chunk_flag=None,
                   overlap_flag=None, eps_flag=None) -> OlaConfig:
    """Overlap-add settings: flags beat config; an unset chunk length
    derives from the checkpoint's chunk duration at the data frame rate,
    and a non-explicit overlap rescales to a fifth of that chunk."""
    raw_ola = raw.get("ola") if isinstance(raw.get("ola"), dict) else {}
    if chunk_flag is not None:
        K = chunk_flag
    elif raw_ola.get("chunk_frames") is not None:
        K = cfg["ola"]["chunk_frames"]
    else:
        K = model.cfg.chunk_frames(seq_rate)
    if overlap_flag is not None:
        overlap = overlap_flag
    elif raw_ola.get("overlap") is not None:
        overlap = cfg["ola"]["overlap"]
    else:
        overlap = max(1, K // 5)
    eps = eps_flag if eps_flag is not None else cfg["ola"]["clamp_eps"]
    return OlaConfig(chunk_frames=K, overlap=overlap, clamp_eps=eps)


def cmd_synth(args) -> int:
    cfg, _ = _load_cfg(args)
    out = _out_dir(args)
    spec = cfgmod.corpus_spec(cfg)
    manifest = build_corpus(spec, out)
    cfgmod.write_resolved(cfg, out)
    print(f"synth: wrote {len(manifest)} utterances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, _ = _load_cfg(args)
    out = _out_dir(args)
    _, seqs = load_corpus(args.corpus)
    sequences = [seqs[k] for k in sorted(seqs)]
    result = fit(sequences, cfgmod.model_config(cfg), cfgmod.bsq_config(cfg),
                 cfgmod.train_config(cfg), cfgmod.plateau_schedule(cfg))
    save_checkpoint(out / "checkpoint.latm", result.model,
                    meta={"best_epoch": result.best_epoch, "epochs": cfg["train"]["epochs"]})
    write_trace(result.trace, out / "loss_trace.csv")
    report.loss_curve_figure(result.trace, out / "loss_curve.png")
    cfgmod.write_resolved(cfg, out)
    first, last = result.trace[0], result.trace[-1]
    print(f"train: loss {first.train_loss:.5g} -> {last.train_loss:.5g} over {last.epoch} epochs, "
          f"best val {result.best_val:.5g} at epoch {result.best_epoch}")
    return 0


def cmd_tokenize(args) -> int:
    cfg, raw = _load_cfg(args)
    out = _out_dir(args)
    model, _ = load_checkpoint(args.checkpoint)
    _, seqs = load_corpus(args.corpus)
    codes_dir = out / "codes"
    codes_dir.mkdir(exist_ok=True)
    entries = []
    for uid in sorted(seqs):
        seq = seqs[uid]
        ola_cfg = _ola_for_model(model, cfg, raw, seq.sample_rate_hint)
        chunk_paths = []
        for j, chunk in enumerate(tokenize_sequence(seq, model, ola_cfg)):
            rel = f"codes/{uid}__c{j:03d}.latc"
            write_codes(chunk.codes, chunk.indices, out / rel)
            chunk_paths.append(rel)
        entries.append({"id": uid, "chunks": chunk_paths})
    (out / "codes_manifest.json").write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    cfgmod.write_resolved(cfg, out)
    print(f"tokenize: wrote codes for {len(entries)} utterances to {out}")
    return 0


def _load_codes(codes_manifest: str | Path) -> dict[str, list[np.ndarray]]:
    path = Path(codes_manifest)
    if not path.exists():
        raise InputError(f"codes manifest not found: {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"cannot parse codes manifest {path}: {e}") from e
    if not isinstance(entries, list) or any("id" not in e or "chunks" not in e for e in entries):
        raise InputError(f"codes manifest {path} must list id/chunks entries")
    root = path.parent
    return {e["id"]: [read_codes(root / rel)[0] for rel in e["chunks"]] for e in entries}


def cmd_analyze(args) -> int:
    cfg, _ = _load_cfg(args)
    out = _out_dir(args)
    manifest = read_manifest(args.corpus)
    codes = _load_codes(args.codes)
    factors = cfg["analysis"]["factors"]
    topk = tuple(cfg["analysis"]["topk"])

    profiles = []  # factors whose profiles carry mass
    degenerate = []  # factors the codes are provably invariant to
    curves = {}
    (out / "profiles").mkdir(exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)
    for factor in factors:
        part = partition_from_labels(manifest, factor)
        prof = profile(codes, part)
        save_profile(prof, out / "profiles" / f"{factor}.json")
        if prof.g.sum() > 0:
            profiles.append(prof)
            gn = prof.normalized()
            save_curve(gn, out / "curves" / f"{factor}.csv")
            curves[factor] = np.cumsum(np.sort(gn)[::-1])
        else:
            degenerate.append(prof)
            print(f"warning: factor {factor!r} has an all-zero importance profile "
                  f"(codes do not vary with it); skipping its curve and similarity rows",
                  file=sys.stderr)

    diag = diagnostics(profiles, topk=topk)
    for prof in degenerate:
        diag["concentration"][prof.factor_name] = {"entropy": None, "gini": None, "degenerate": True}
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")

    if cfg["analysis"]["figures"]:
        figs = out / "figures"
        figs.mkdir(exist_ok=True)
        report.cumulative_mass_figure(curves, figs / "cumulative_mass.png")
        report.heatmap_figure({p.factor_name: p.g for p in profiles + degenerate},
                              figs / "importance_heatmap.png")
        for p in profiles + degenerate:
            report.profile_figure(p.factor_name, p.g, figs / f"profile_{p.factor_name}.png")

    cfgmod.write_resolved(cfg, out)
    for factor, stats in sorted(diag["concentration"].items()):
        if stats.get("degenerate"):
            print(f"analyze: {factor}: degenerate (all-zero profile)")
        else:
            print(f"analyze: {factor}: entropy={stats['entropy']:.4f} nats, gini={stats['gini']:.4f}")
    for row in diag["similarity"]:
        a, b = row["factors"]
        extras = ", ".join(f"jacc@{k}={row[f'jaccard@{k}']:.3f}" for k in topk)
        print(f"analyze: {a} vs {b}: spearman={row['spearman']:.3f}, {extras}")
    return 0


def cmd_edit(args) -> int:
    cfg, raw = _load_cfg(args)
    out = _out_dir(args)
    model, _ = load_checkpoint(args.checkpoint)
    manifest, seqs = load_corpus(args.corpus)
    by_id = {e["id"]: e for e in manifest}
    prof, _normed = load_profile(args.profile)
    g = prof.g
    factor = args.factor or prof.factor_name
    gamma = args.gamma if args.gamma is not None else cfg["analysis"]["gamma"]
    policy = args.policy or cfg["analysis"]["policy"]
    seed = args.seed if args.seed is not None else cfg["analysis"]["seed"]
    shift = args.shift if args.shift is not None else cfg["analysis"]["shift"]

    def matches(entry, selector):
        if not selector:
            return True
        key, val = selector.split("=", 1)
        return str(entry["labels"].get(key)) == val

    sources = [e["id"] for e in manifest if matches(e, args.source_label)]
    pool = [e["id"] for e in manifest if matches(e, args.target_label)]
    if not sources:
        raise InputError("no source utterances match the selector")
    pairs = cyclic_pairs(sources, pool, by_id, factor=factor, shift=shift)

    (out / "edited").mkdir(exist_ok=True)
    entries = []
    for n, (sid, tid) in enumerate(pairs):
        edited, plan = edit_and_decode(
            seqs[sid], seqs[tid], model, g, gamma, policy=policy, seed=seed + n,
            ola_cfg=_ola_for_model(model, cfg, raw, seqs[sid].sample_rate_hint))
        rel = f"edited/{sid}__to__{tid}.latf"
        write_features(edited, out / rel)
        entries.append({
            "source_id": sid, "target_id": tid, "policy": plan.policy,
            "gamma": plan.gamma, "m": plan.m, "slots": [int(s) for s in plan.slots],
            "output_path": rel,
        })
    write_edit_manifest(entries, out / "edits.json")
    cfgmod.write_resolved(cfg, out)
    print(f"edit: wrote {len(entries)} edited utterances to {out} "
          f"(policy={policy}, gamma={gamma}, m={entries[0]['m'] if entries else 0})")
    return 0


def cmd_stitch(args) -> int:
    cfg, raw = _load_cfg(args)
    out = _out_dir(args)
    model, _ = load_checkpoint(args.checkpoint)
    manifest, seqs = load_corpus(args.corpus)
    (out / "features").mkdir(exist_ok=True)
    entries = []
    for e in manifest:
        seq = seqs[e["id"]]
        ola_cfg = _ola_for_model(model, cfg, raw, seq.sample_rate_hint,
                                 args.chunk_frames, args.overlap_frames, args.clamp_eps)
        resynth = resynthesize(seq, model, ola_cfg)
        rel = f"features/{e['id']}.latf"
        write_features(resynth, out / rel)
        entries.append({"id": e["id"], "path": rel, "labels": e["labels"]})
    write_manifest(entries, out / "manifest.json")
    cfgmod.write_resolved(cfg, out)
    print(f"stitch: resynthesized {len(entries)} utterances to {out}")
    return 0


def cmd_probe(args) -> int:
    cfg, _ = _load_cfg(args)
    out = _out_dir(args)
    fit_manifest, fit_seqs = load_corpus(args.fit_manifest)
    factor = args.factor
    labels_by_id = {e["id"]: str(e["labels"].get(factor)) for e in fit_manifest}
    if any(v == "None" for v in labels_by_id.values()):
        raise InputError(f"factor {factor!r} missing from some labels")
    ids = sorted(fit_seqs)
    probe = fit_probe([fit_seqs[i].frames for i in ids], [labels_by_id[i] for i in ids], factor_name=factor)

    if args.eval_manifest:
        ev_manifest, ev_seqs = load_corpus(args.eval_manifest)
        ev_labels = {e["id"]: str(e["labels"].get(factor)) for e in ev_manifest}
        ev_ids = sorted(ev_seqs)
        acc, confusion = accuracy_and_confusion(
            probe, [ev_seqs[i].frames for i in ev_ids], [ev_labels[i] for i in ev_ids])
    else:
        acc, confusion = accuracy_and_confusion(
            probe, [fit_seqs[i].frames for i in ids], [labels_by_id[i] for i in ids])

    rates = {}
    for edits_path in args.edits or []:
        entries = read_edit_manifest(edits_path)
        root = Path(edits_path).parent
        groups: dict[str, tuple[list, list]] = {}
        for e in entries:
            if e["target_id"] not in labels_by_id:
                raise InputError(f"edit target {e['target_id']!r} not in the fit manifest")
            frames = read_features(root / e["output_path"]).frames
            feats, intended = groups.setdefault(e["policy"], ([], []))
            feats.append(frames)
            intended.append(labels_by_id[e["target_id"]])
        for policy, (feats, intended) in groups.items():
            rates.setdefault(policy, []).append((transfer_rate(probe, feats, intended), len(feats)))

    transfer_by_policy = {
        policy: sum(r * n for r, n in vals) / sum(n for _, n in vals)
        for policy, vals in rates.items()
    }
    report_doc = {
        "factor": factor,
        "accuracy": acc,
        "confusion_matrix": confusion,
        "transfer_rate_by_policy": transfer_by_policy,
    }
    save_report(report_doc, out / "probe_report.json")
    cfgmod.write_resolved(cfg, out)
    line = f"probe: factor={factor} accuracy={acc:.3f}"
    if transfer_by_policy:
        line += " " + " ".join(f"transfer[{p}]={r:.3f}" for p, r in sorted(transfer_by_policy.items()))
    print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slottok",
        description="Latent-slot tokenizer lab: synthesize corpora, train, analyze, edit.")
    parser.add_argument("--version", action="version",
                        version=f"slottok {__version__} (formats: LATF v{LATF_VERSION}, "
                                f"LATC v{LATC_VERSION}, checkpoint v{LATM_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (JSON-parsed)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic factor-controlled corpus")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the slot autoencoder")
    common(p)
    p.add_argument("--corpus", required=True, help="corpus manifest.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tokenize", help="write quantized slot codes per utterance")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("analyze", help="slot-importance profiles and diagnostics")
    common(p)
    p.add_argument("--corpus", required=True, help="manifest with factor labels")
    p.add_argument("--codes", required=True, help="codes_manifest.json from tokenize")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("edit", help="importance-guided token swaps between utterances")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--profile", required=True, help="importance profile JSON")
    p.add_argument("--factor", help="factor for pair construction (default: profile's factor)")
    p.add_argument("--gamma", type=float, help="cumulative-mass threshold")
    p.add_argument("--policy", choices=["importance", "random", "least"])
    p.add_argument("--seed", type=int, help="seed for the random policy")
    p.add_argument("--shift", type=int, help="cyclic shift for target pairing")
    p.add_argument("--source-label", metavar="KEY=VALUE", help="filter source utterances")
    p.add_argument("--target-label", metavar="KEY=VALUE", help="filter the target pool")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("stitch", help="overlap-add resynthesis of a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--chunk-frames", type=int, help="analysis window length in frames")
    p.add_argument("--overlap-frames", type=int, dest="overlap_frames", help="window overlap in frames")
    p.add_argument("--clamp-eps", type=float, dest="clamp_eps", help="envelope clamp epsilon")
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("probe", help="nearest-centroid factor probe and transfer rates")
    common(p)
    p.add_argument("--fit-manifest", required=True, help="manifest of features to fit on")
    p.add_argument("--factor", required=True)
    p.add_argument("--eval-manifest", help="manifest to evaluate accuracy on (default: fit)")
    p.add_argument("--edits", action="append", help="edit manifest(s) for transfer rates")
    p.set_defaults(func=cmd_probe)

    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)  # bit-reproducible reductions across runs
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except SlotTokError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
