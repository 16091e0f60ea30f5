"""Command-line interface.

Subcommands: protect, attack, sweep, verify-nfl, export.
Exit codes: 0 success / bounds pass, 1 bound violation, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .attack import AttackerKind
from .errors import ConfigError, NflbenchError
from .harness import (
    ExperimentConfig,
    MockLLM,
    export_results,
    load_results_json,
    prepare_context,
    run_protocol,
    sweep,
    verify_nfl,
)
from .metrics import recovery_extent_report, select_optimum
from .embedding import tokenize

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_json_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    return config


def _require_prompt_mode(config: ExperimentConfig, ctx):
    if ctx.mode != "prompts":
        raise ConfigError("this subcommand needs a prompts-mode config")


def _cmd_protect(args) -> int:
    config = _load_config(args)
    ctx = prepare_context(config)
    _require_prompt_mode(config, ctx)
    prompt = tokenize(args.prompt, ctx.vocab)
    pcfg = config.mechanisms[args.grid_index]
    if config.mock_llm:
        llm = MockLLM.from_text(config.mock_llm, ctx.vocab, ctx.table)
        result = run_protocol(
            prompt, pcfg, ctx.table, llm, root=np.random.SeedSequence((config.seed,))
        )
        protected = result.protected
        for step in result.steps:
            print(f"# {step}")
        print(f"protected: {protected.prompt().text(ctx.vocab)}")
        print(f"response:  {result.response.text(ctx.vocab)}")
    else:
        from .protection import protect_prompt

        protected = protect_prompt(
            prompt, pcfg, ctx.table, root=np.random.SeedSequence((config.seed,))
        )
        print(f"protected: {protected.prompt().text(ctx.vocab)}")
    return EXIT_OK


def _cmd_attack(args) -> int:
    """Protect the prompt, then run the configured attacker against the
    protected version and report per-token recovery."""
    from .harness import _attack_trace
    from .protection import protect_prompt
    from .attack import BigramModel

    config = _load_config(args)
    ctx = prepare_context(config)
    _require_prompt_mode(config, ctx)
    prompt = tokenize(args.prompt, ctx.vocab)
    pcfg = config.mechanisms[args.grid_index]
    protected = protect_prompt(
        prompt, pcfg, ctx.table, root=np.random.SeedSequence((config.seed,))
    )
    bigram = None
    if config.attacker.kind is AttackerKind.CONTEXTUAL_BIGRAM:
        bigram = BigramModel(ctx.table.vocab_size).fit(ctx.prompt_pool)
    from .rng import substream

    trace = _attack_trace(
        ctx, config, protected, protected.prompt(), substream(config.seed, 0), bigram
    )
    r, clamped = recovery_extent_report(trace, prompt, ctx.table, ctx.omega)
    final = trace.recovered_ids[-1]
    recovered_text = " ".join(ctx.vocab.token(int(i)) for i in final)
    exact = sum(int(a == b) for a, b in zip(final, prompt.token_ids))
    print(f"original:  {prompt.text(ctx.vocab)}")
    print(f"protected: {protected.prompt().text(ctx.vocab)}")
    print(f"recovered: {recovered_text}")
    print(f"exact tokens: {exact}/{len(prompt)}  recovery_extent: {r:.6g}"
          + (f"  (clamped {clamped})" if clamped else ""))
    if args.trace:
        trace.to_csv(args.trace)
        print(f"trace written to {args.trace}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    records = sweep(config, workers=args.workers)
    out = args.out or config.output
    if out is None:
        raise ConfigError("no output path: pass --out or set 'output' in the config")
    fmt = args.format or ("json" if str(out).endswith(".json") else "csv")
    export_results(records, fmt, out)
    print(f"wrote {len(records)} records to {out}")
    best = select_optimum(records, config.xi)
    if best is None:
        print(f"no grid point satisfies eps_p <= xi = {config.xi:.6g}")
    else:
        print(
            f"optimum under eps_p <= {config.xi:.6g}: mech={best.mech} "
            f"param={best.param:.6g} eps_u={best.eps_u:.6g} eps_p={best.eps_p:.6g}"
        )
    return EXIT_OK


def _cmd_verify_nfl(args) -> int:
    config = _load_config(args)
    code, lines, _ = verify_nfl(config, workers=args.workers)
    for line in lines:
        print(line)
    return EXIT_VIOLATION if code else EXIT_OK


def _cmd_export(args) -> int:
    records = load_results_json(args.results)
    fmt = args.format or ("json" if str(args.out).endswith(".json") else "csv")
    export_results(records, fmt, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nflbench",
        description="Privacy-preserving prompt perturbation bench: mechanisms, "
        "attacks, trade-off sweeps, and no-free-lunch bound verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_prompt=False):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if needs_prompt:
            p.add_argument("--prompt", required=True, help="whitespace-tokenized prompt")
            p.add_argument("--grid-index", type=int, default=0,
                           help="which mechanism grid point to use (default 0)")

    p = sub.add_parser("protect", help="protect a prompt (and query the mock server)")
    common(p, needs_prompt=True)
    p.set_defaults(func=_cmd_protect)

    p = sub.add_parser("attack", help="protect a prompt, then attack the protected version")
    common(p, needs_prompt=True)
    p.add_argument("--trace", default=None, help="write the attack trace CSV here")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("sweep", help="evaluate the mechanism grid and export records")
    common(p)
    p.add_argument("--out", default=None, help="output path (.csv or .json)")
    p.add_argument("--format", choices=["csv", "json"], default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("verify-nfl", help="certify the bound slacks on every grid point")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_verify_nfl)

    p = sub.add_parser("export", help="convert a JSON results file")
    p.add_argument("--results", required=True, help="JSON results file from sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["csv", "json"], default=None)
    p.set_defaults(func=_cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NflbenchError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
