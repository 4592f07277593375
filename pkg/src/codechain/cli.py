"""Command-line pipeline: synth, fit, label, eval.

One JSON config file (field names mirror RunConfig, plus an optional
"synth" sub-object) drives every stage; individual flags override
config values. Exit codes: 0 success, 1 usage or config error, 2 data
error, 3 internal invariant violation.

All output files use the shared record envelope and are byte-identical
across reruns with the same config and across --threads settings;
runtime knobs (threads, paths) are deliberately left out of the header
echoes.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import diagnostics, markov, pseudolabel, records, rvq, synth, transport
from .errors import CodechainError, ConfigError, DataError, InternalError


@dataclass
class RunConfig:
    patch_length: int = 8
    n_coarse: int = 8
    n_fine: int = 64
    embed_mode: str = "znorm"
    d_dim: int | None = None
    projection_seed: int = 0
    epsilon: float = 1e-8
    sigma: float = 0.2
    tau: float = 1.0
    r_top: float = 0.5
    use_ca: bool = True
    prior: str | list = "uniform"
    max_iters: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.patch_length < 2:
            raise ConfigError("patch_length must be >= 2")
        if self.n_coarse < 2 or self.n_fine < 2:
            raise ConfigError("n_coarse and n_fine must be >= 2")
        if self.embed_mode not in rvq.EMBED_MODES:
            raise ConfigError(f"embed_mode must be one of {rvq.EMBED_MODES}")
        if self.d_dim is not None and self.d_dim < 2:
            raise ConfigError("d_dim must be >= 2 when set")
        if not self.epsilon > 0.0:
            raise ConfigError("epsilon must be > 0")
        if not self.sigma > 0.0:
            raise ConfigError("sigma must be > 0")
        if not self.tau > 0.0:
            raise ConfigError("tau must be > 0")
        if not 0.0 < self.r_top <= 1.0:
            raise ConfigError("r_top must lie in (0, 1]")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if not isinstance(self.prior, str) and not isinstance(self.prior, (list, tuple)):
            raise ConfigError("prior must be 'uniform' or a probability vector")
        if isinstance(self.prior, str) and self.prior != "uniform":
            raise ConfigError(f"prior must be 'uniform' or a vector, got {self.prior!r}")

    def embed_spec(self) -> rvq.EmbedSpec:
        return rvq.EmbedSpec(
            mode=self.embed_mode, d_dim=self.d_dim, projection_seed=self.projection_seed
        )

    def label_prior(self, n_classes: int) -> pseudolabel.LabelPrior:
        if isinstance(self.prior, str):
            return pseudolabel.LabelPrior.uniform(n_classes, tau=self.tau)
        probs = np.asarray(self.prior, dtype=np.float64)
        if probs.shape != (n_classes,):
            raise ConfigError(
                f"prior needs {n_classes} entries, got {probs.shape}"
            )
        return pseudolabel.LabelPrior(probs=probs, tau=self.tau)

    def echo(self) -> dict:
        return {
            "patch_length": self.patch_length,
            "n_coarse": self.n_coarse,
            "n_fine": self.n_fine,
            "embed_mode": self.embed_mode,
            "d_dim": self.d_dim,
            "projection_seed": self.projection_seed,
            "epsilon": self.epsilon,
            "sigma": self.sigma,
            "tau": self.tau,
            "r_top": self.r_top,
            "use_ca": self.use_ca,
            "prior": self.prior if isinstance(self.prior, str) else [float(x) for x in self.prior],
            "max_iters": self.max_iters,
            "seed": self.seed,
        }


_RUN_FIELDS = {f.name for f in fields(RunConfig)}
_SYNTH_FIELDS = {f.name for f in fields(synth.SynthConfig)}


def load_run_config(path, overrides: dict) -> tuple[RunConfig, dict, set]:
    """Merge config file and flag overrides; returns (cfg, synth section, provided keys)."""
    data: dict = {}
    synth_section: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: config is not valid JSON: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        synth_section = raw.pop("synth", {})
        if not isinstance(synth_section, dict):
            raise ConfigError(f"{path}: 'synth' section must be an object")
        unknown = sorted(set(raw) - _RUN_FIELDS)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        data = raw
    provided = set(data)
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
            provided.add(key)
    cfg = RunConfig(**data)
    cfg.validate()
    return cfg, synth_section, provided


def _parse_vector(text: str):
    if "," in text:
        try:
            return tuple(float(x) for x in text.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad vector value {text!r}") from exc
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad numeric value {text!r}") from exc


def _parse_prior(text: str):
    if text == "uniform":
        return "uniform"
    if text.strip().startswith("["):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad prior {text!r}") from exc
    return list(np.atleast_1d(np.asarray(_parse_vector(text), dtype=np.float64)))


_SYNTH_FLAGS = (
    "n_classes",
    "n_channels",
    "length",
    "n_primitives",
    "sine_freq",
    "regime_stickiness",
    "n_source",
    "n_target",
    "base_noise",
    "curvature_jitter",
    "phase_jitter",
)
_SYNTH_VECTOR_FLAGS = (
    "shift_scale",
    "shift_offset",
    "noise",
    "target_regime_mix",
    "class_probs_source",
    "class_probs_target",
)


def build_synth_config(cfg: RunConfig, synth_section: dict, args) -> synth.SynthConfig:
    merged = dict(synth_section)
    unknown = sorted(set(merged) - _SYNTH_FIELDS)
    if unknown:
        raise ConfigError(f"unknown synth config keys {unknown}")
    for name in _SYNTH_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    for name in _SYNTH_VECTOR_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            parsed = _parse_vector(value)
            if name.startswith("class_probs"):
                parsed = tuple(np.atleast_1d(np.asarray(parsed, dtype=np.float64)))
            merged[name] = parsed
    merged.setdefault("patch_length", cfg.patch_length)
    merged.setdefault("seed", cfg.seed)
    if "class_regimes" in merged and merged["class_regimes"] is not None:
        merged["class_regimes"] = np.asarray(merged["class_regimes"], dtype=np.float64)
    return synth.SynthConfig(**merged)


def cmd_synth(args) -> None:
    cfg, synth_section, _ = load_run_config(args.config, _run_overrides(args))
    scfg = build_synth_config(cfg, synth_section, args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source, target = synth.generate(scfg)
    echo = {"run": cfg.echo(), "synth": scfg.echo()}
    ds.save_corpus(out_dir / "source.jsonl", source, config=echo)
    ds.save_corpus(out_dir / "target.jsonl", ds.strip_labels(target), config=echo)
    ds.save_truth(out_dir / "target_truth.jsonl", target, config=echo)
    n_variants = 0
    if args.corrupt_channel is not None or args.corrupt_magnitudes is not None:
        if args.corrupt_channel is None or args.corrupt_magnitudes is None:
            raise ConfigError(
                "--corrupt-channel and --corrupt-magnitudes must be given together"
            )
        mags = args.corrupt_magnitudes
        if not isinstance(mags, tuple):
            mags = (float(mags),)
        noise_seed = (
            scfg.seed + 1000 if args.corrupt_seed is None else int(args.corrupt_seed)
        )
        for i, mag in enumerate(mags):
            noisy = synth.inject_channel_noise(
                target, args.corrupt_channel, float(mag), noise_seed
            )
            variant_echo = dict(echo)
            variant_echo["corrupt"] = {
                "channel": int(args.corrupt_channel),
                "magnitude": float(mag),
                "seed": noise_seed,
            }
            ds.save_corpus(
                out_dir / f"target_corrupt_{i}.jsonl",
                ds.strip_labels(noisy),
                config=variant_echo,
            )
        n_variants = len(mags)
    line = f"synth: wrote {len(source)} source and {len(target)} target instances to {out_dir}"
    if n_variants:
        line += f" plus {n_variants} corrupted target variants"
    print(line)


def cmd_fit(args) -> None:
    cfg, _, _ = load_run_config(args.config, _run_overrides(args))
    source = ds.load_corpus(args.source)
    if source.role != "source":
        raise DataError(f"fit needs a source-role corpus, got role {source.role!r}")
    spec = cfg.embed_spec()
    latents = rvq.embed_dataset(source, cfg.patch_length, spec)
    fit_result = rvq.fit(
        latents, cfg.n_coarse, cfg.n_fine, max_iters=cfg.max_iters, seed=cfg.seed
    )
    quantizer = fit_result.quantizer
    codes = [rvq.encode(quantizer, g) for g in latents]
    class_tm = markov.build_class_tm(
        codes, [inst.label for inst in source], source.n_classes, cfg.n_coarse
    )
    channel_src = markov.build_channel_tm(codes, cfg.n_coarse)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"run": cfg.echo()}
    rvq.save_quantizer(
        out_dir / "quantizer.jsonl",
        quantizer,
        spec,
        cfg.patch_length,
        cfg.seed,
        config=echo,
    )
    markov.save_transitions(
        out_dir / "transitions.jsonl", class_tm, channel_src, cfg.epsilon, config=echo
    )

    stats = rvq.code_stats(codes, quantizer, latents)
    print(
        f"fit: {len(source)} instances, {stats.n_patches} patches, "
        f"d_dim={quantizer.d_dim}, iterations={len(fit_result.coarse_losses)}"
    )
    print(
        f"coarse codes: {int((stats.coarse_counts == 0).sum())}/{quantizer.coarse.n_codes} dead "
        f"({stats.coarse_dead_pct:.1f}%), fine codes: {int((stats.fine_counts == 0).sum())}/"
        f"{quantizer.fine.n_codes} dead ({stats.fine_dead_pct:.1f}%)"
    )
    print(
        f"recon mse: coarse {stats.mse_coarse_only:.6f}, "
        f"coarse+fine {stats.mse_coarse_fine:.6f}"
    )
    for k in range(class_tm.n_classes):
        mean_tm = np.mean([tm.probs for tm in class_tm.tms[k]], axis=0)
        i, j = np.unravel_index(int(np.argmax(mean_tm)), mean_tm.shape)
        print(
            f"class {k}: mean self-transition {float(np.diag(mean_tm).mean()):.3f}, "
            f"top transition {i}->{j} p={float(mean_tm[i, j]):.3f}"
        )


def cmd_label(args) -> None:
    cfg, _, provided = load_run_config(args.config, _run_overrides(args))
    target = ds.load_corpus(args.target)
    quantizer, spec, patch_length, _ = rvq.load_quantizer(args.quantizer)
    class_tm, channel_src, _, bundle_eps = markov.load_transitions(args.transitions)
    if target.n_channels != class_tm.n_channels:
        raise DataError(
            f"target has {target.n_channels} channels but the transition bundle has "
            f"{class_tm.n_channels}"
        )
    if class_tm.n_codes != quantizer.coarse.n_codes:
        raise DataError("quantizer and transition bundle disagree on n_coarse")
    epsilon = cfg.epsilon if "epsilon" in provided else bundle_eps
    if not epsilon > 0.0:
        raise ConfigError("epsilon must be > 0")

    codes_trg = rvq.encode_dataset(quantizer, target, patch_length, spec)
    channel_trg = markov.build_channel_tm(codes_trg, quantizer.coarse.n_codes)
    computed = transport.channel_weights(
        channel_src.smoothed(epsilon),
        channel_trg.smoothed(epsilon),
        transport.cosine_cost(quantizer.coarse),
        cfg.sigma,
    )
    used = computed if cfg.use_ca else transport.ChannelWeights.ones(
        target.n_channels, cfg.sigma
    )
    prior = cfg.label_prior(class_tm.n_classes)
    labels = pseudolabel.label_dataset(
        target,
        quantizer,
        class_tm.smoothed(epsilon),
        used,
        prior,
        patch_length,
        spec=spec,
        threads=args.threads,
        precomputed=codes_trg,
    )
    selected = pseudolabel.top_r_select(labels, cfg.r_top)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"run": cfg.echo()}
    pseudolabel.save_labels(out_dir / "labels.jsonl", labels, used, config=echo)
    pseudolabel.save_selection(
        out_dir / "selected.jsonl", labels, selected, cfg.r_top, config=echo
    )
    report_echo = dict(echo)
    report_echo["weights_used"] = [float(x) for x in used.weights]
    transport.write_alignment_report(
        out_dir / "alignment_report.tsv", computed, config=report_echo
    )
    counts = np.bincount([pl.label for pl in labels], minlength=class_tm.n_classes)
    mean_conf = float(np.mean([pl.confidence for pl in labels]))
    print(
        f"label: {len(labels)} instances, mean confidence {mean_conf:.4f}, "
        f"selected {len(selected)} (r_top={cfg.r_top})"
    )
    print("label counts: " + " ".join(f"{k}:{int(c)}" for k, c in enumerate(counts)))
    print(
        "channel weights: "
        + " ".join(f"{float(w):.4f}" for w in used.weights)
        + ("" if cfg.use_ca else " (alignment disabled)")
    )


def cmd_eval(args) -> None:
    cfg, _, provided = load_run_config(args.config, _run_overrides(args))
    labels, header = pseudolabel.load_labels(args.labels)
    truth, n_classes = ds.load_truth(args.truth)
    if not labels:
        raise DataError("label file holds no records")
    missing = [pl.instance_id for pl in labels if pl.instance_id not in truth]
    if missing:
        raise DataError(
            f"{len(missing)} labeled ids missing from the truth file, e.g. {missing[:3]}"
        )
    pred = [pl.label for pl in labels]
    true = [truth[pl.instance_id] for pl in labels]
    overall = diagnostics.accuracy_mf1(pred, true, n_classes)
    print(
        f"eval: n={overall.n} accuracy={overall.accuracy:.4f} "
        f"macro_f1={overall.macro_f1:.4f}"
    )
    print("per-class f1: " + " ".join(f"{x:.4f}" for x in overall.per_class_f1))

    out_records = [
        {
            "split": "all",
            "n": overall.n,
            "accuracy": overall.accuracy,
            "macro_f1": overall.macro_f1,
            "per_class_f1": [float(x) for x in overall.per_class_f1],
        }
    ]
    subset_idx = None
    if args.subset is not None:
        recs, _ = pseudolabel.load_selection(args.subset)
        subset_idx = [int(r["index"]) for r in recs]
        if any(not 0 <= i < len(labels) for i in subset_idx):
            raise DataError("selection index out of range for the label file")
    elif "r_top" in provided:
        subset_idx = [int(i) for i in pseudolabel.top_r_select(labels, cfg.r_top)]
    if subset_idx is not None:
        sub = diagnostics.accuracy_mf1(
            [pred[i] for i in subset_idx], [true[i] for i in subset_idx], n_classes
        )
        print(
            f"top-r subset: n={sub.n} accuracy={sub.accuracy:.4f} "
            f"macro_f1={sub.macro_f1:.4f}"
        )
        out_records.append(
            {
                "split": "selected",
                "n": sub.n,
                "accuracy": sub.accuracy,
                "macro_f1": sub.macro_f1,
                "per_class_f1": [float(x) for x in sub.per_class_f1],
            }
        )
    if args.out is not None:
        records.write_record_file(
            args.out,
            {"kind": "metrics", "n_classes": n_classes, "config": {"run": cfg.echo()}},
            out_records,
        )


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise ConfigError(message)


def _run_overrides(args) -> dict:
    out = {}
    for name in _RUN_FIELDS:
        value = getattr(args, f"run_{name}", None)
        if value is not None:
            out[name] = value
    return out


def _add_run_flags(parser) -> None:
    g = parser.add_argument_group("pipeline configuration")
    g.add_argument("--config", default=None, help="JSON config file")
    g.add_argument("--patch-length", dest="run_patch_length", type=int)
    g.add_argument("--n-coarse", dest="run_n_coarse", type=int)
    g.add_argument("--n-fine", dest="run_n_fine", type=int)
    g.add_argument("--embed-mode", dest="run_embed_mode", choices=rvq.EMBED_MODES)
    g.add_argument("--d-dim", dest="run_d_dim", type=int)
    g.add_argument("--projection-seed", dest="run_projection_seed", type=int)
    g.add_argument("--epsilon", dest="run_epsilon", type=float)
    g.add_argument("--sigma", dest="run_sigma", type=float)
    g.add_argument("--tau", dest="run_tau", type=float)
    g.add_argument("--r-top", dest="run_r_top", type=float)
    g.add_argument(
        "--use-ca",
        dest="run_use_ca",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="toggle channel alignment weights",
    )
    g.add_argument("--prior", dest="run_prior", type=_parse_prior)
    g.add_argument("--max-iters", dest="run_max_iters", type=int)
    g.add_argument("--seed", dest="run_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="codechain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic source/target corpus pair")
    _add_run_flags(p_synth)
    p_synth.add_argument("--out-dir", required=True)
    for name in _SYNTH_FLAGS:
        kind = float if name in ("sine_freq", "regime_stickiness", "base_noise", "curvature_jitter", "phase_jitter") else int
        p_synth.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None)
    for name in _SYNTH_VECTOR_FLAGS:
        p_synth.add_argument(
            f"--{name.replace('_', '-')}",
            dest=name,
            type=str,
            default=None,
            help="scalar or comma-separated per-channel values",
        )
    p_synth.add_argument("--corrupt-channel", dest="corrupt_channel", type=int, default=None)
    p_synth.add_argument(
        "--corrupt-magnitudes",
        dest="corrupt_magnitudes",
        type=_parse_vector,
        default=None,
        help="comma-separated noise magnitudes, one corrupted target file each",
    )
    p_synth.add_argument("--corrupt-seed", dest="corrupt_seed", type=int, default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_fit = sub.add_parser("fit", help="fit codebooks and transition matrices on a source corpus")
    _add_run_flags(p_fit)
    p_fit.add_argument("--source", required=True)
    p_fit.add_argument("--out-dir", required=True)
    p_fit.set_defaults(func=cmd_fit)

    p_label = sub.add_parser("label", help="pseudo-label a target corpus")
    _add_run_flags(p_label)
    p_label.add_argument("--target", required=True)
    p_label.add_argument("--quantizer", required=True)
    p_label.add_argument("--transitions", required=True)
    p_label.add_argument("--out-dir", required=True)
    p_label.add_argument("--threads", type=int, default=1)
    p_label.set_defaults(func=cmd_label)

    p_eval = sub.add_parser("eval", help="score pseudo-labels against sealed truth")
    _add_run_flags(p_eval)
    p_eval.add_argument("--labels", required=True)
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--subset", default=None, help="selection file to score as well")
    p_eval.add_argument("--out", default=None, help="write metrics as a record file")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except InternalError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    except CodechainError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
