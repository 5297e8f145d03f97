"""
EaaW experiment driver.

    eaaw gen-data | train | embed | extract | verify | attack | ablate | report
         [--config PATH] [--seed N] [--out DIR]

Every command reads its inputs from the run directory (`out` in the config),
writes its artifacts there, and updates manifest.json.  Reports are CSV.

Exit codes: 0 success (a failed verification is a result, not an error),
1 usage/config/path/format errors, 2 runtime or numerical errors.
Logs:      all logging goes to stderr; stdout carries command output only.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from eaaw import attacks, datasets, embedding, extraction, models, reporting, verification, watermark
from eaaw.config import ExperimentConfig, load_config, log_level, worker_count
from eaaw.errors import (
    CodecError,
    ConfigError,
    DataError,
    DimensionError,
    EaawError,
    FormatError,
    IndexRangeError,
    InvariantError,
    PathError,
)

logger = logging.getLogger("eaaw")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

_USAGE_ERRORS = (
    ConfigError, PathError, FormatError, DataError, CodecError, InvariantError, DimensionError, IndexRangeError,
)

# Seed offsets for materials that must be independent of the owner's.
_INDEPENDENT_SEED = 1
_ADVERSARY_SEED = 2
_RANDOM_TRIGGER_SEED = 3

ATTACK_SUMMARY_FIELDS = ("kind", "benign_acc", "wsr", "log10_p", "decision", "adversary_wsr")
ABLATE_FIELDS = ("sweep", "value", "wsr", "log10_p", "benign_acc", "l2")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise ConfigError(f"usage: {message}")


def _handle_error(exc: Exception, context: str) -> str:
    """Convert library exceptions into one readable line."""
    if isinstance(exc, PathError):
        return f"[{context}] Missing artifact: {exc}. Run the earlier pipeline commands first."
    if isinstance(exc, FormatError):
        return f"[{context}] Malformed file: {exc}"
    if isinstance(exc, ConfigError):
        return f"[{context}] Configuration error: {exc}"
    if isinstance(exc, EaawError):
        return f"[{context}] {type(exc).__name__}: {exc}"
    return f"[{context}] Unexpected error: {exc}"


def _exit_code(exc: Exception) -> int:
    return EXIT_USAGE if isinstance(exc, _USAGE_ERRORS) else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# Run directory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunLayout:
    root: Path

    def data(self, split: str) -> Path:
        return self.root / "data" / split

    def model(self, name: str) -> Path:
        return self.root / "models" / f"{name}.eaaw"

    def key(self, name: str) -> Path:
        return self.root / "keys" / name

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    def trigger(self, index: int) -> Path:
        return self.key(f"trigger_{index}.eatr")

    def owner_triggers(self) -> list[watermark.TriggerSample]:
        paths = sorted(self.key("").glob("trigger_*.eatr"))
        if not paths:
            raise PathError(f"no owner triggers in {self.key('')}")
        return [watermark.load_trigger(p) for p in paths]

    def masks(self) -> watermark.MaskSet:
        path = self.key("masks.npy")
        if not path.is_file():
            raise PathError(f"mask set not found: {path}")
        return watermark.MaskSet(np.load(path, allow_pickle=False), "stored")

    def relative(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()


def _owner_key(config: ExperimentConfig, layout: RunLayout) -> attacks.OwnerKey:
    trigger = layout.owner_triggers()[0]
    masks = layout.masks()
    return attacks.OwnerKey(
        trigger=trigger,
        masks=masks,
        partition=watermark.segment_input(trigger.size, masks.k),
        wm=watermark.load_watermark(layout.key("watermark.txt")),
        eval_data=datasets.load_dataset(layout.data("test")),
        lam=config.embed_lam,
        alpha=config.verify_alpha,
        mode=config.verify_mode,
        target_policy=config.embed_target_policy,
    )


def _payload(config: ExperimentConfig) -> watermark.Watermark:
    source = config.watermark_source
    if source == "glyph":
        wm = watermark.glyph_watermark()
        if len(wm) != config.watermark_k:
            raise ConfigError(f"the built-in glyph has {len(wm)} bits; set watermark.source = random for k={config.watermark_k}")
        return wm
    if source == "random":
        return watermark.random_watermark(config.watermark_k, config.seed)
    return watermark.load_watermark(Path(config.source).parent / source if config.source else source)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(config: ExperimentConfig, layout: RunLayout, args: argparse.Namespace) -> dict[str, Path]:
    sizes = [config.data_n_train, config.data_n_test, config.data_n_heldout]
    full = datasets.generate(config.data_kind, sum(sizes), config.seed, **config.data_params())
    artifacts = {}
    for name, part in zip(("train", "test", "heldout"), datasets.split(full, sizes)):
        artifacts[f"data.{name}"] = datasets.save_dataset(part, layout.data(name))
    print(f"generated {config.data_kind}: {sizes[0]} train / {sizes[1]} test / {sizes[2]} held-out")
    return artifacts


def cmd_train(config: ExperimentConfig, layout: RunLayout, args: argparse.Namespace) -> dict[str, Path]:
    train_data = datasets.load_dataset(layout.data("train"))
    test_data = datasets.load_dataset(layout.data("test"))
    spec = config.model_spec()
    artifacts = {}
    for name, seed in (("clean", config.seed), ("independent", config.seed + _INDEPENDENT_SEED)):
        model = models.train(
            spec, train_data, config.train_epochs, config.train_optimizer,
            config.train_lr, seed, config.train_batch_size,
        )
        artifacts[f"model.{name}"] = models.save_model(model, layout.model(name))
        print(f"{name}: test accuracy {models.accuracy(model, test_data):.4f}")
    return artifacts


def cmd_embed(config: ExperimentConfig, layout: RunLayout, args: argparse.Namespace) -> dict[str, Path]:
    clean = models.load_model(layout.model("clean"))
    train_data = datasets.load_dataset(layout.data("train"))
    test_data = datasets.load_dataset(layout.data("test"))
    heldout = datasets.load_dataset(layout.data("heldout"))
    wm = _payload(config)
    embed_config = config.embed_config()
    if config.verify_mode == "label_only" and embed_config.mask_scheme == "leave_one_out":
        logger.warning("label_only verification with leave-one-out masks is unreliable; use random masks")

    triggers = datasets.build_triggers(config.trigger_kind, config.trigger_count, train_data, clean, config.seed)
    independent = datasets.build_triggers(
        config.trigger_kind, 1, heldout, clean, config.seed + _INDEPENDENT_SEED,
    )[0]
    result = embedding.embed_watermark(clean, train_data, triggers, wm, embed_config, eval_data=test_data)

    artifacts = {
        "model.watermarked": models.save_model(result.model, layout.model("watermarked")),
        "key.watermark": watermark.save_watermark(wm, layout.key("watermark.txt")),
        "key.independent_trigger": watermark.save_trigger(independent, layout.key("independent.eatr")),
        "report.history": reporting.write_csv(
            layout.report("history.csv"), embedding.HISTORY_FIELDS, [r.as_row() for r in result.history],
        ),
    }
    mask_path = layout.key("masks.npy")
    mask_path.parent.mkdir(parents=True, exist_ok=True)
    np.save(mask_path, np.ascontiguousarray(result.masks.masks), allow_pickle=False)
    artifacts["key.masks"] = mask_path
    for i, trigger in enumerate(triggers):
        artifacts[f"key.trigger_{i}"] = watermark.save_trigger(trigger, layout.trigger(i))

    last = result.history[-1]
    print(f"embedded {len(wm)}-bit watermark: wsr {last.wsr:.4f}, benign accuracy {last.benign_acc:.4f} "
          f"(was {result.baseline_accuracy:.4f}) after {last.epoch} epochs")
    if last.benign_ppl is not None:
        print(f"benign perplexity {last.benign_ppl:.4f} (was {result.baseline_ppl:.4f})")
    return artifacts


def cmd_extract(config: ExperimentConfig, layout: RunLayout, args: argparse.Namespace) -> dict[str, Path]:
    model = models.load_model(args.model or layout.model("watermarked"))
    trigger = watermark.load_trigger(args.trigger) if args.trigger else layout.owner_triggers()[0]
    masks = layout.masks()
    partition = watermark.segment_input(trigger.size, masks.k)
    extracted = extraction.extract_watermark(
        model, trigger, masks, partition, config.verify_mode, config.embed_lam, config.embed_target_policy,
    )
    print(" ".join(str(b) for b in extracted.tolist()))
    return {"report.extracted": watermark.save_watermark(extracted, layout.report("extracted.txt"))}


def _verification_cases(args: argparse.Namespace, layout: RunLayout) -> list[tuple[str, Path, Path | None]]:
    if args.model or args.trigger:
        return [("custom", Path(args.model) if args.model else layout.model("watermarked"),
                 Path(args.trigger) if args.trigger else None)]
    return [
        ("owner", layout.model("watermarked"), None),
        ("independent_model", layout.model("independent"), None),
        ("independent_trigger", layout.model("watermarked"), layout.key("independent.eatr")),
    ]


def cmd_verify(config: ExperimentConfig, layout: RunLayout, args: argparse.Namespace) -> dict[str, Path]:
    key = _owner_key(config, layout)
    rows = []
    for case, model_path, trigger_path in _verification_cases(args, layout):
        model = models.load_model(model_path)
        trigger = watermark.load_trigger(trigger_path) if trigger_path else key.trigger
        report = verification.verify(
            model, trigger, key.masks, watermark.segment_input(trigger.size, key.masks.k), key.wm,
            key.alpha, key.mode, key.lam, key.target_policy,
        )
        benign = verification.harmless_degree(model, key.eval_data, [])
        ppl = embedding.benign_perplexity(model, key.eval_data)
        print(f"== {case} ==\n{verification.format_report(report)}")
        print(f"benign accuracy: {benign:.4f}" + ("" if ppl is None else f"  perplexity: {ppl:.4f}") + "\n")
        rows.append({
            "case": case,
            "trigger_kind": config.trigger_kind,
            "benign_acc": f"{benign:.6f}",
            "benign_ppl": "" if ppl is None else f"{ppl:.6f}",
            **verification.report_csv_row(report),
        })
    return {"report.verify": reporting.write_csv(layout.report("verify.csv"), reporting.VERIFY_FIELDS, rows)}


def _run_attack(kind: str, config: ExperimentConfig, layout: RunLayout, key: attacks.OwnerKey) -> attacks.AttackResult:
    model = models.load_model(layout.model("watermarked"))
    heldout = datasets.load_dataset(layout.data("heldout"))
    attack_config = config.attack_config(kind)
    if kind == "finetune":
        return attacks.finetune_attack(model, heldout, attack_config, key)
    if kind == "prune":
        return attacks.prune_attack(model, attack_config, key)
    if kind == "overwrite":
        seed = config.seed + _ADVERSARY_SEED
        adversary = datasets.build_triggers(config.trigger_kind, config.trigger_count, heldout, model, seed)
        adversary_wm = watermark.random_watermark(len(key.wm), seed)
        return attacks.overwrite_attack(model, heldout, adversary, adversary_wm, config.embed_config(seed=seed), key)
    if kind == "unlearn":
        guesses = datasets.build_triggers(
            "noise", config.trigger_count, heldout, model, config.seed + _RANDOM_TRIGGER_SEED,
        )
        unlearn_config = config.embed_config(
            r1=attack_config.r1, epochs=max(1, attack_config.epochs),
            lr=attack_config.lr, optimizer=attack_config.optimizer,
        )
        return attacks.unlearn_attack(model, heldout, key.wm, guesses, unlearn_config, key)
    partition = watermark.segment_input(key.trigger.size, min(attack_config.parts, key.trigger.size))
    return attacks.input_mask_model(model, partition, attack_config, key)


def cmd_attack(config: ExperimentConfig, layout: RunLayout, args: argparse.Namespace) -> dict[str, Path]:
    key = _owner_key(config, layout)
    kinds = [args.kind] if args.kind else list(config.attack_kinds)
    artifacts: dict[str, Path] = {}
    summary = []
    for kind in kinds:
        result = _run_attack(kind, config, layout, key)
        artifacts[f"report.attack_{kind}"] = reporting.write_csv(
            layout.report(f"attack_{kind}.csv"), attacks.TRACE_FIELDS, [p.as_row() for p in result.trace],
        )
        final = result.final
        summary.append({
            "kind": kind,
            "benign_acc": f"{final.benign_acc:.6f}",
            "wsr": f"{final.wsr:.6f}",
            "log10_p": f"{final.log10_p:.6f}",
            "decision": "true" if final.log10_p <= np.log10(key.alpha) else "false",
            "adversary_wsr": f"{result.extras['adversary_wsr']:.6f}" if "adversary_wsr" in result.extras else "",
        })
    print(reporting.format_table(ATTACK_SUMMARY_FIELDS, summary))
    artifacts["report.attacks"] = reporting.write_csv(layout.report("attacks.csv"), ATTACK_SUMMARY_FIELDS, summary)
    return artifacts


def _ablation_point(
    sweep: str,
    value,
    config: ExperimentConfig,
    clean: models.Model,
    train_data: models.Dataset,
    test_data: models.Dataset,
    wm: watermark.Watermark,
) -> dict[str, str]:
    overrides: dict = {}
    count = config.trigger_count
    if sweep == "r1":
        overrides["r1"] = float(value)
    elif sweep == "epsilon":
        overrides["epsilon"] = float(value)
    elif sweep == "loss":
        overrides["loss"] = str(value)
    elif sweep == "n_masks":
        overrides.update(mask_scheme="random", n_masks=int(value))
    elif sweep == "triggers":
        count = int(value)
    embed_config = config.embed_config(**overrides)
    triggers = datasets.build_triggers(config.trigger_kind, count, train_data, clean, config.seed)
    result = embedding.embed_watermark(clean, train_data, triggers, wm, embed_config, eval_data=test_data)
    report = verification.verify(
        result.model, triggers[0], result.masks, result.partition, wm,
        config.verify_alpha, config.verify_mode, embed_config.lam, embed_config.target_policy,
    )
    logger.info("ablation %s=%s: wsr %.4f", sweep, value, report.wsr)
    return {
        "sweep": sweep,
        "value": str(value),
        "wsr": f"{report.wsr:.6f}",
        "log10_p": f"{report.log10_p:.6f}",
        "benign_acc": f"{result.history[-1].benign_acc:.6f}",
        "l2": f"{result.history[-1].l2:.6f}",
    }


def cmd_ablate(config: ExperimentConfig, layout: RunLayout, args: argparse.Namespace) -> dict[str, Path]:
    sweeps = config.sweeps()
    if not sweeps:
        raise ConfigError("no ablation sweeps configured; set ablate.r1, ablate.n_masks, ablate.triggers, ablate.epsilon or ablate.loss")
    clean = models.load_model(layout.model("clean"))
    train_data = datasets.load_dataset(layout.data("train"))
    test_data = datasets.load_dataset(layout.data("test"))
    wm = _payload(config)

    artifacts: dict[str, Path] = {}
    for sweep, values in sweeps.items():
        rows: list[dict[str, str] | None] = [None] * len(values)
        with ThreadPoolExecutor(max_workers=min(worker_count(), len(values))) as executor:
            futures = {
                executor.submit(_ablation_point, sweep, value, config, clean, train_data, test_data, wm): i
                for i, value in enumerate(values)
            }
            for future in as_completed(futures):
                rows[futures[future]] = future.result()
        print(reporting.format_table(ABLATE_FIELDS, rows))
        artifacts[f"report.ablate_{sweep}"] = reporting.write_csv(
            layout.report(f"ablate_{sweep}.csv"), ABLATE_FIELDS, rows,
        )
    return artifacts


def cmd_report(config: ExperimentConfig, layout: RunLayout, args: argparse.Namespace) -> dict[str, Path]:
    run_dir = Path(args.run_dir) if args.run_dir else layout.root
    summary = reporting.summarize(run_dir)
    print(reporting.format_table(reporting.SUMMARY_FIELDS, summary))
    return {"report.summary": reporting.write_csv(
        layout.report("summary.csv"), reporting.SUMMARY_FIELDS, summary,
    )}


COMMANDS: dict[str, Callable[[ExperimentConfig, RunLayout, argparse.Namespace], dict[str, Path]]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "embed": cmd_embed,
    "extract": cmd_extract,
    "verify": cmd_verify,
    "attack": cmd_attack,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eaaw", description="Explanation-as-a-watermark experiments at desk scale.")
    parser.add_argument("command", choices=sorted(COMMANDS), help="pipeline step to run")
    parser.add_argument("--config", help="experiment config file (key = value)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the run directory")
    parser.add_argument("--model", help="extract/verify: model file instead of the watermarked model")
    parser.add_argument("--trigger", help="extract/verify: trigger file instead of the owner trigger")
    parser.add_argument("--kind", choices=attacks.ATTACK_KINDS, help="attack: run a single attack kind")
    parser.add_argument("run_dir", nargs="?", help="report: run directory to summarise")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        level = log_level()
    except ConfigError as exc:
        print(_handle_error(exc, "settings"), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )

    context = "eaaw"
    try:
        args = build_parser().parse_args(argv)
        context = args.command
        config = load_config(args.config, args.seed, args.out)
        layout = RunLayout(config.out_dir)
        artifacts = COMMANDS[args.command](config, layout, args)
        reporting.RunManifest(
            command=args.command,
            config_hash=config.digest(),
            seed=config.seed,
            artifacts={name: layout.relative(Path(path)) for name, path in artifacts.items()},
        ).write(layout.root)
    except EaawError as exc:
        print(_handle_error(exc, context), file=sys.stderr)
        return _exit_code(exc)
    except Exception as exc:
        logger.exception("unhandled error in %s", context)
        print(_handle_error(exc, context), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
