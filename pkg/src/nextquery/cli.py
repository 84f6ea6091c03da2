"""Command-line entry points.

Subcommands: predict, evaluate, curate, train-toy, bench-tokens, report.
Exit codes: 0 success, 1 configuration or IO failure, 2 completed with
per-sample failures. Data outputs are byte-stable for a fixed seed and
input; everything volatile (timestamps, argv) is confined to meta.json.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import analytics, config as config_mod, curation, grpo, history, judging
from .conversation import (
    DEFAULT_TOKENIZER,
    Conversation,
    parse_conversations,
    synthesize_conversations,
    write_error_report,
)
from .errors import ConfigError
from .frames import frame_output
from .gateway import GatewayError, LlmClient, ScriptedBackend, UnscriptedCallError
from .history import EpisodeError, InterfaceSpec

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; bad flags are a
    configuration failure here, so remap to 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_CONFIG)


@dataclass
class CliContext:
    run: config_mod.RunConfig
    seed: int
    out_dir: Path
    scripted: Optional[ScriptedBackend] = None
    _clients: dict = field(default_factory=dict)

    def client(self, name: Optional[str] = None) -> LlmClient:
        name = name or self.run.default_backend
        if name not in self._clients:
            backend_cfg = self.run.backends.get(name)
            if backend_cfg is None:
                raise ConfigError(f"backend {name!r} is not defined")
            if self.scripted is not None:
                self._clients[name] = LlmClient(
                    backend_cfg,
                    transport=self.scripted,
                    sleeper=lambda _s: None,
                    jitter_rng=random.Random(self.seed),
                )
            else:
                if backend_cfg.base_url.startswith("mock://"):
                    raise ConfigError(
                        f"backend {name!r} is a mock but no --mock-script was given"
                    )
                self._clients[name] = LlmClient(backend_cfg)
        return self._clients[name]

    def judge_clients(self) -> list[tuple[str, LlmClient]]:
        return [(name, self.client(name)) for name in self.run.judge_backends]


def _load_context(args: argparse.Namespace, command: str) -> CliContext:
    run = config_mod.load_config(Path(args.config)) if args.config else config_mod.RunConfig()
    seed = args.seed if args.seed is not None else run.seed
    out_dir = Path(args.out) if args.out else Path(f"{command}-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    scripted = None
    if args.mock_script:
        rules = config_mod.load_mock_script(Path(args.mock_script))
        scripted = ScriptedBackend(rules)
    ctx = CliContext(run=run, seed=seed, out_dir=out_dir, scripted=scripted)
    if getattr(args, "backend", None):
        if args.backend not in run.backends:
            raise ConfigError(f"backend {args.backend!r} is not defined in the config")
        ctx.run = config_mod.RunConfig(
            seed=run.seed,
            interface=run.interface,
            backends=run.backends,
            default_backend=args.backend,
            judge_backends=run.judge_backends,
            judge_lambda=run.judge_lambda,
            curation=run.curation,
            grpo_stage1=run.grpo_stage1,
            grpo_stage2=run.grpo_stage2,
            workers=run.workers,
            prompt_dir=run.prompt_dir,
        )
    return ctx


def _write_meta(ctx: CliContext, command: str, extra: Optional[dict] = None) -> None:
    meta = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": ctx.seed,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    if extra:
        meta.update(extra)
    (ctx.out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_dataset(path: Path, allow_unsplit: bool = False):
    if not path.is_file():
        raise ConfigError(f"dataset not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return parse_conversations(fh, allow_unsplit=allow_unsplit)


# --- predict -----------------------------------------------------------------


def cmd_predict(args: argparse.Namespace) -> int:
    ctx = _load_context(args, "predict")
    report = _read_dataset(Path(args.dataset))
    if not report.conversations:
        raise ConfigError("dataset contains no usable conversations")
    spec = ctx.run.interface
    if args.interface:
        spec = InterfaceSpec(
            kind=args.interface,
            w=ctx.run.interface.w,
            k=ctx.run.interface.k,
            n_candidates=ctx.run.interface.n_candidates,
        )
    backend = ctx.client()
    ledger = analytics.TokenLedger()
    failures: list[dict] = []
    truncated = False
    episodes_path = ctx.out_dir / "episodes.jsonl"
    with episodes_path.open("w", encoding="utf-8") as eps_fh:
        try:
            for conv in report.conversations:
                try:
                    result, _ = history.run_episode(
                        backend, spec, conv, ledger=ledger, prompt_dir=ctx.run.prompt_dir
                    )
                except EpisodeError as exc:
                    failures.append(
                        {"id": exc.conversation_id, "turn": exc.turn, "error": str(exc.cause)}
                    )
                    continue
                for step in result.steps:
                    row = {
                        "id": conv.id,
                        "interface": spec.kind,
                        "turn": step.turn,
                        "candidates": list(step.prediction.candidates),
                        "memory": step.prediction.memory.text,
                        "memory_tokens": step.prediction.memory.token_count,
                        "format_ok": step.prediction.format_ok,
                        "input_tokens": step.input_tokens,
                        "output_tokens": step.output_tokens,
                    }
                    eps_fh.write(json.dumps(row, sort_keys=True) + "\n")
        except KeyboardInterrupt:
            eps_fh.write(json.dumps({"truncated": True}, sort_keys=True) + "\n")
            truncated = True
    with (ctx.out_dir / "ledger.jsonl").open("w", encoding="utf-8") as fh:
        ledger.write_jsonl(fh)
    if failures:
        with (ctx.out_dir / "failures.jsonl").open("w", encoding="utf-8") as fh:
            for row in failures:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    if report.errors:
        with (ctx.out_dir / "input_errors.jsonl").open("w", encoding="utf-8") as fh:
            write_error_report(report.errors, fh)
    _write_meta(ctx, "predict", {"interface": spec.kind, "dataset": str(args.dataset)})
    n_bad = len(failures) + len(report.errors)
    print(
        f"predict: {len(report.conversations) - len(failures)} conversations under "
        f"{spec.kind}, {len(ledger)} calls, {n_bad} failures -> {ctx.out_dir}"
    )
    return EXIT_PARTIAL if (n_bad or truncated) else EXIT_OK


# --- evaluate ----------------------------------------------------------------


def cmd_evaluate(args: argparse.Namespace) -> int:
    ctx = _load_context(args, "evaluate")
    dataset = _read_dataset(Path(args.dataset))
    by_id = {c.id: c for c in dataset.conversations}

    predictions_path = Path(args.predictions)
    if not predictions_path.is_file():
        raise ConfigError(f"predictions file not found: {predictions_path}")
    final_rows: dict[str, dict] = {}
    order: list[str] = []
    with predictions_path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row.get("truncated"):
                continue
            cid = row["id"]
            if cid not in final_rows:
                order.append(cid)
            if cid not in final_rows or row["turn"] > final_rows[cid]["turn"]:
                final_rows[cid] = row
    if not final_rows:
        raise ConfigError("predictions file holds no prediction rows")
    orphans = [cid for cid in order if cid not in by_id]
    if orphans:
        print(f"error: prediction ids missing from dataset: {', '.join(orphans)}", file=sys.stderr)
        return EXIT_CONFIG

    judges = ctx.judge_clients()
    scores_path = ctx.out_dir / "scores.jsonl"
    audit_path = ctx.out_dir / "audit.jsonl"
    excluded = 0
    scored: list[float] = []
    with scores_path.open("w", encoding="utf-8") as scores_fh, audit_path.open(
        "w", encoding="utf-8"
    ) as audit_fh:
        for cid in order:
            row = final_rows[cid]
            conv = by_id[cid]
            candidates = [c for c in row.get("candidates", [])]
            verdicts = judging.score_candidates(
                judges, candidates, conv.target, prompt_dir=ctx.run.prompt_dir
            )
            judging.write_judge_audit(audit_fh, cid, verdicts)
            usable = [(i, v) for i, v in enumerate(verdicts) if v is not None]
            if not usable:
                excluded += 1
                continue
            best_idx, best = max(usable, key=lambda iv: (iv[1].final_level, -iv[0]))
            out_row = {
                "id": cid,
                "method": row.get("interface", "unknown"),
                "level": best.final_level,
                "score": best.score_0_100,
                "tie_broken": best.tie_broken,
                "best_candidate_idx": best_idx,
                "turns": len(conv.turns),
            }
            scores_fh.write(json.dumps(out_row, sort_keys=True) + "\n")
            scored.append(best.score_0_100)
    summary = {
        "n_scored": len(scored),
        "n_excluded": excluded,
        "mean_score": sum(scored) / len(scored) if scored else None,
    }
    (ctx.out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_meta(ctx, "evaluate", {"predictions": str(args.predictions), "dataset": str(args.dataset)})
    mean = summary["mean_score"]
    print(
        f"evaluate: {len(scored)} scored, {excluded} excluded, "
        f"mean score {mean if mean is None else round(mean, 3)} -> {ctx.out_dir}"
    )
    return EXIT_PARTIAL if excluded else EXIT_OK


# --- curate ------------------------------------------------------------------


def cmd_curate(args: argparse.Namespace) -> int:
    ctx = _load_context(args, "curate")
    report = _read_dataset(Path(args.input), allow_unsplit=True)
    if not report.conversations:
        raise ConfigError("no usable conversations in the input")
    backend = ctx.client()
    result = curation.run_pipeline(
        report.conversations,
        backend,
        rules=ctx.run.curation,
        prompt_dir=ctx.run.prompt_dir,
        mine_truncations=not args.no_mining,
    )
    with (ctx.out_dir / "kept.jsonl").open("w", encoding="utf-8") as fh:
        for conv in result.kept + result.mined:
            fh.write(conv.to_json_line() + "\n")
    with (ctx.out_dir / "verdicts.jsonl").open("w", encoding="utf-8") as fh:
        curation.write_audit_jsonl(fh, result.audits)
    (ctx.out_dir / "attrition.txt").write_text(result.report.to_text() + "\n")
    (ctx.out_dir / "attrition.json").write_text(
        json.dumps(result.report.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    if report.errors:
        with (ctx.out_dir / "input_errors.jsonl").open("w", encoding="utf-8") as fh:
            write_error_report(report.errors, fh)
    _write_meta(ctx, "curate", {"input": str(args.input)})
    print(result.report.to_text())
    print(f"curate: final {result.report.final} samples -> {ctx.out_dir}")
    return EXIT_PARTIAL if report.errors else EXIT_OK


# --- train-toy ---------------------------------------------------------------


def cmd_train_toy(args: argparse.Namespace) -> int:
    ctx = _load_context(args, "train-toy")
    tasks, episodes, dims = grpo.make_toy_curriculum()
    log_rows: list[dict] = []
    evals: dict = {}

    stage1_path = ctx.out_dir / "stage1.npz"
    stage2_path = ctx.out_dir / "stage2.npz"

    policy = grpo.ToyPolicy(seed=ctx.seed, **dims)
    evals["untrained_reward"] = grpo.mean_episode_reward(policy, episodes)

    run_stage1 = args.stage in ("1", "both")
    run_stage2 = args.stage in ("2", "both")

    if run_stage1:
        result = grpo.train_stage1(policy, tasks, ctx.run.grpo_stage1, seed=ctx.seed)
        log_rows.extend(result.log)
        grpo.save_checkpoint(stage1_path, policy, ctx.run.grpo_stage1, ctx.seed, stage=1)
        evals["stage1_reward"] = grpo.mean_episode_reward(policy, episodes)

    if run_stage2:
        if not run_stage1:
            if args.from_scratch:
                policy = grpo.ToyPolicy(seed=ctx.seed, **dims)
            elif stage1_path.is_file():
                policy, _cfg, _meta = grpo.load_checkpoint(stage1_path)
            else:
                raise ConfigError(
                    f"stage 2 needs {stage1_path} (or --from-scratch to skip stage 1)"
                )
        result = grpo.train_stage2(policy, episodes, ctx.run.grpo_stage2, seed=ctx.seed + 1)
        log_rows.extend(result.log)
        grpo.save_checkpoint(stage2_path, policy, ctx.run.grpo_stage2, ctx.seed + 1, stage=2)
        evals["stage2_reward"] = grpo.mean_episode_reward(policy, episodes)

    with (ctx.out_dir / "training_log.jsonl").open("w", encoding="utf-8") as fh:
        for row in log_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (ctx.out_dir / "eval.json").write_text(json.dumps(evals, indent=2, sort_keys=True) + "\n")
    _write_meta(ctx, "train-toy", {"stage": args.stage})
    summary = ", ".join(f"{k}={v:.3f}" for k, v in sorted(evals.items()))
    print(f"train-toy: {summary} -> {ctx.out_dir}")
    return EXIT_OK


# --- bench-tokens -------------------------------------------------------------


_BENCH_MEMORY_WORDS = 120
_BENCH_SUMMARY_WORDS = 90


def _bench_rules(n_candidates: int) -> list:
    from .gateway import ScriptRule

    memory_text = " ".join(f"note{i}" for i in range(_BENCH_MEMORY_WORDS))
    summary_text = " ".join(f"gist{i}" for i in range(_BENCH_SUMMARY_WORDS))
    candidates = [f"candidate query {i}" for i in range(1, n_candidates + 1)]
    return [
        ScriptRule(match="Summarize the conversation", reply=summary_text),
        ScriptRule(match="<memory>", reply=frame_output(memory_text, candidates)),
        ScriptRule(reply=frame_output(None, candidates)),
    ]


def cmd_bench_tokens(args: argparse.Namespace) -> int:
    ctx = _load_context(args, "bench-tokens")
    interfaces = [s.strip() for s in args.interfaces.split(",") if s.strip()]
    for kind in interfaces:
        if kind not in history.INTERFACE_KINDS:
            raise ConfigError(f"unknown interface: {kind!r}")
    convs = synthesize_conversations(
        n=args.n,
        turns=args.turns,
        query_words=args.query_words,
        response_words=args.response_words,
        seed=ctx.seed,
    )
    base = ctx.run.interface
    ledger = analytics.TokenLedger()
    for kind in interfaces:
        spec = InterfaceSpec(kind=kind, w=base.w, k=base.k, n_candidates=base.n_candidates)
        from .gateway import scripted_client

        backend = scripted_client(_bench_rules(spec.n_candidates))
        for conv in convs:
            history.run_episode(backend, spec, conv, ledger=ledger, prompt_dir=ctx.run.prompt_dir)
    curves = {kind: analytics.efficiency_curve(ledger, kind) for kind in interfaces}
    with (ctx.out_dir / "curves.csv").open("w", encoding="utf-8", newline="") as fh:
        analytics.write_curves_csv(curves, fh)
    ratios = {}
    if "full_history" in curves and "recursive_memory" in curves:
        full = dict(curves["full_history"])
        mem = dict(curves["recursive_memory"])
        ratios = {
            str(turn): full[turn] / mem[turn] for turn in sorted(full) if turn in mem and mem[turn]
        }
    (ctx.out_dir / "ratios.json").write_text(json.dumps(ratios, indent=2, sort_keys=True) + "\n")
    _write_meta(ctx, "bench-tokens", {"n": args.n, "turns": args.turns})
    last = max((int(t) for t in ratios), default=None)
    tail = f", full/memory ratio at turn {last}: {ratios[str(last)]:.1f}x" if last else ""
    print(f"bench-tokens: {len(convs)} conversations x {len(interfaces)} interfaces{tail} -> {ctx.out_dir}")
    return EXIT_OK


# --- report ------------------------------------------------------------------


def cmd_report(args: argparse.Namespace) -> int:
    ctx = _load_context(args, "report")
    scores_path = Path(args.scores)
    if not scores_path.is_file():
        raise ConfigError(f"scores file not found: {scores_path}")
    grouped: dict[str, dict] = {}
    with scores_path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            entry = grouped.setdefault(
                row["id"],
                {
                    "scores": {},
                    "turns": int(row.get("turns", 1)),
                    "difficulty": row.get("difficulty"),
                    "transfer": row.get("transfer"),
                },
            )
            entry["scores"][row.get("method", "unknown")] = float(row["score"])
    if not grouped:
        raise ConfigError("scores file holds no rows")
    samples = [
        analytics.ScoreSample(
            conversation_id=cid,
            scores=entry["scores"],
            turns=entry["turns"],
            difficulty=entry["difficulty"],
            transfer=entry["transfer"],
        )
        for cid, entry in grouped.items()
    ]
    report = analytics.stratified_report(samples)

    methods = sorted({m for s in samples for m in s.scores})
    per_method: dict[str, list[float]] = {
        m: [s.scores[m] for s in samples if m in s.scores] for m in methods
    }
    cis = {}
    for method, values in per_method.items():
        if len(values) >= 2:
            mean, lo, hi = analytics.bootstrap_ci(values, seed=ctx.seed)
            cis[method] = {"mean": mean, "lo": lo, "hi": hi}
    dominance = {}
    for a in methods:
        for b in methods:
            if a == b:
                continue
            paired = [
                (s.scores[a], s.scores[b]) for s in samples if a in s.scores and b in s.scores
            ]
            if paired:
                xs, ys = zip(*paired)
                dominance[f"{a}>{b}"] = analytics.paired_bootstrap_p(xs, ys, seed=ctx.seed)

    payload = {"report": report.to_dict(), "ci": cis, "dominance": dominance}
    (ctx.out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with (ctx.out_dir / "strata.csv").open("w", encoding="utf-8", newline="") as fh:
        analytics.write_strata_csv(report, fh)
    if args.ledger:
        ledger_path = Path(args.ledger)
        if not ledger_path.is_file():
            raise ConfigError(f"ledger file not found: {ledger_path}")
        with ledger_path.open(encoding="utf-8") as fh:
            ledger = analytics.TokenLedger.read_jsonl(fh)
        kinds = sorted({row.interface for row in ledger})
        curves = {kind: analytics.efficiency_curve(ledger, kind) for kind in kinds}
        with (ctx.out_dir / "curves.csv").open("w", encoding="utf-8", newline="") as fh:
            analytics.write_curves_csv(curves, fh)
    _write_meta(ctx, "report", {"scores": str(args.scores)})
    print(f"report: {report.n_samples} samples, {len(methods)} method(s) -> {ctx.out_dir}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--backend", help="backend name from the config")
    common.add_argument("--mock-script", help="JSON file of scripted backend rules")
    common.add_argument("--out", help="output directory")

    parser = _Parser(prog="nextquery", description="Next-query prediction toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("predict", parents=[common], help="run a history interface over a dataset")
    p.add_argument("dataset", help="JSONL of conversations with targets")
    p.add_argument("--interface", choices=history.INTERFACE_KINDS, help="override the configured interface")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions with the judge ensemble")
    p.add_argument("--predictions", required=True, help="episodes.jsonl from predict")
    p.add_argument("--dataset", required=True, help="the dataset the predictions came from")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("curate", parents=[common], help="run the curation cascade over raw sessions")
    p.add_argument("input", help="JSONL of raw sessions (last query becomes the target)")
    p.add_argument("--no-mining", action="store_true", help="skip truncation mining")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train-toy", parents=[common], help="two-stage GRPO on the built-in toy task")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--from-scratch", action="store_true", help="let stage 2 start untrained")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("bench-tokens", parents=[common], help="token-cost curves on synthetic data")
    p.add_argument("--n", type=int, default=20, help="synthetic conversations")
    p.add_argument("--turns", type=int, default=14, help="turns per conversation")
    p.add_argument("--query-words", type=int, default=200, help="words per synthetic query")
    p.add_argument("--response-words", type=int, default=1000, help="words per synthetic response")
    p.add_argument(
        "--interfaces",
        default=",".join(history.INTERFACE_KINDS),
        help="comma-separated interface kinds",
    )
    p.set_defaults(func=cmd_bench_tokens)

    p = sub.add_parser("report", parents=[common], help="stratified statistics over score files")
    p.add_argument("--scores", required=True, help="scores.jsonl from evaluate")
    p.add_argument("--ledger", help="optional ledger.jsonl for efficiency curves")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnscriptedCallError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GatewayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except grpo.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
