"""Command-line entry point wiring the lifecycle together.

Subcommands: gen, train, embed, index, eval, ablate, swap, report, plus
init-config to write a starter config. Exit codes: 0 success, 1 guardrail
failure, 2 config or version-chain error.

BLAS thread pools are pinned to one thread before numpy loads so that
repeated runs of a pipeline are byte-reproducible on the same machine.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402

EXIT_OK = 0
EXIT_GUARDRAIL = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semretrieve",
        description="Two-tower semantic retrieval: train, index, evaluate, serve.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    init = sub.add_parser("init-config", help="write a starter pipeline config")
    init.add_argument("path")
    init.add_argument("--seed", type=int, default=7)
    init.add_argument("--docs-per-vertical", type=int, default=1000)

    for name, help_text in (
        ("gen", "generate corpus, interactions, truth, and mined sets"),
        ("train", "run the training stages"),
        ("embed", "encode all documents at full width"),
        ("index", "build graph indices for each cut/precision"),
        ("eval", "run the offline k-NN protocol and efficiency report"),
        ("run", "run the whole pipeline end to end"),
        ("report", "print artifact lineage"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True)
        cmd.add_argument("--workdir", required=True)
        if name == "train":
            cmd.add_argument("--stage", choices=["1", "2", "both"], default="both")
            cmd.add_argument("--max-steps", type=int, default=None)
            cmd.add_argument("--batch-size", type=int, default=None)
            cmd.add_argument("--lr", type=float, default=None)
            cmd.add_argument("--seed", type=int, default=None)
        if name == "embed":
            cmd.add_argument("--model", default=None)
            cmd.add_argument("--since", default=None,
                             help="re-encode only records whose content changed")
        if name in ("eval", "run"):
            cmd.add_argument("--timing", action="store_true",
                             help="also measure per-query latency (non-deterministic sidecar)")

    ablate = sub.add_parser("ablate", help="run a named ablation study")
    ablate.add_argument(
        "study",
        choices=["input-format", "mrl-vs-fc", "loss-batch-sensitivity", "rerank-lift"],
    )
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--workdir", required=True)

    swap = sub.add_parser("swap", help="validate and atomically activate an index")
    swap.add_argument("--registry", required=True)
    swap.add_argument("--artifact", default=None,
                      help="index file to activate (omit with --rollback)")
    swap.add_argument("--min-recall", type=float, default=0.85)
    swap.add_argument("--probe-k", type=int, default=10)
    swap.add_argument("--ef-search", type=int, default=128)
    swap.add_argument("--rollback", action="store_true",
                      help="roll the registry back to the previous artifact")

    return parser


def _pipeline_pieces(args):
    from .pipeline import PipelineConfig, Workspace

    cfg = PipelineConfig.load(args.config)
    ws = Workspace(args.workdir)
    ws.ensure()
    return cfg, ws


def _cmd_train(cfg, ws, args) -> dict:
    from .pipeline import step_train

    overrides = {}
    for key, attr in (("max_steps", "max_steps"), ("batch_size", "batch_size"),
                      ("lr", "lr"), ("seed", "seed")):
        value = getattr(args, attr)
        if value is not None:
            overrides[key] = value
    if overrides:
        for stage in ("stage1", "stage2"):
            cfg.raw[stage].update(overrides)
    stages = {"1": ("stage1",), "2": ("stage2",), "both": ("stage1", "stage2")}[args.stage]
    return step_train(cfg, ws, stages=stages)


def _cmd_ablate(cfg, ws, args) -> str:
    from .ablations import (
        study_input_format,
        study_loss_batch_sensitivity,
        study_mrl_vs_fc,
        study_rerank_lift,
    )
    from .corpus import CorpusSpec

    spec = cfg.corpus_spec()
    build = cfg.build_config()
    base_train = cfg.train_config("stage1")
    if args.study == "input-format":
        result = study_input_format(spec, base_train, build)
        letter = "B"
    elif args.study == "mrl-vs-fc":
        result = study_mrl_vs_fc(spec, base_train, build)
        letter = "D"
    elif args.study == "loss-batch-sensitivity":
        section = cfg.raw.get("ablations", {}).get("batch_sensitivity", {})
        e_spec = CorpusSpec.from_dict(section["corpus"]) if "corpus" in section else spec
        result = study_loss_batch_sensitivity(e_spec, build)
        letter = "E"
    else:
        result = study_rerank_lift(spec, base_train, build, mining=cfg.mining())
        letter = "F"
    out_path = ws.path(f"ablation_{letter}.txt")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(result["table"])
    return result["table"] + f"written to {out_path}\n"


def _cmd_swap(args) -> str:
    from .ann import probe_validator, rollback_registry_file, swap_registry_file

    if args.rollback:
        state = rollback_registry_file(args.registry)
        return f"rolled back; active: {state['active']}\n"
    if args.artifact is None:
        from .errors import ConfigError

        raise ConfigError("swap requires --artifact (or --rollback)")
    validator = probe_validator(
        k=args.probe_k, ef_search=args.ef_search, min_recall=args.min_recall
    )
    state = swap_registry_file(args.registry, args.artifact, validator)
    return f"swapped; active: {state['active']} previous: {state['previous']}\n"


def main(argv=None) -> int:
    from .errors import (
        ConfigError,
        GuardrailError,
        IndexFormatError,
        SemRetrieveError,
        VersionMismatchError,
    )

    args = build_parser().parse_args(argv)
    try:
        if args.command == "init-config":
            from .pipeline import PipelineConfig, default_config

            PipelineConfig(
                raw=default_config(seed=args.seed, docs_per_vertical=args.docs_per_vertical)
            ).dump(args.path)
            print(f"wrote {args.path}")
            return EXIT_OK
        if args.command == "swap":
            sys.stdout.write(_cmd_swap(args))
            return EXIT_OK

        cfg, ws = _pipeline_pieces(args)
        if args.command == "gen":
            from .pipeline import step_gen

            print(json.dumps(step_gen(cfg, ws), sort_keys=True))
        elif args.command == "train":
            print(json.dumps(_cmd_train(cfg, ws, args), sort_keys=True))
        elif args.command == "embed":
            from .pipeline import step_embed

            print(json.dumps(step_embed(cfg, ws, model_path=args.model, since=args.since),
                             sort_keys=True))
        elif args.command == "index":
            from .pipeline import step_index

            print(json.dumps(step_index(cfg, ws), sort_keys=True))
        elif args.command == "eval":
            from .pipeline import step_eval

            print(json.dumps(step_eval(cfg, ws, timing=args.timing), sort_keys=True))
        elif args.command == "run":
            from .pipeline import run_full_pipeline

            print(json.dumps(run_full_pipeline(cfg, ws, timing=args.timing), sort_keys=True))
        elif args.command == "report":
            from .pipeline import step_report

            sys.stdout.write(step_report(cfg, ws))
        elif args.command == "ablate":
            sys.stdout.write(_cmd_ablate(cfg, ws, args))
        return EXIT_OK
    except (ConfigError, VersionMismatchError, IndexFormatError) as exc:
        print(f"config/version error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GuardrailError as exc:
        print(f"guardrail failure: {exc}", file=sys.stderr)
        return EXIT_GUARDRAIL
    except SemRetrieveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GUARDRAIL


if __name__ == "__main__":
    sys.exit(main())
