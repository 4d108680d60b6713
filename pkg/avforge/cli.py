"""
Command line interface.

    avforge extract --base BASE --aligned ALIGNED --domain medical --out AV
    avforge merge RECIPE
    avforge sweep --base BASE --av AV --dataset DATA --grid=-1:1:0.1
    avforge eval --model MODEL --dataset DATA [--instruction TEXT | --judge]
    avforge search --base BASE --av medical=AV ... --dataset medical=DATA ... --target medical=avd ...
    avforge cost
    avforge dataset {validate,split,render,generate} ...
    avforge inspect CHECKPOINT

Results are printed to stdout, as JSON with `--output json`; log messages
go to stderr. Grids starting with a minus sign must be attached with "=",
e.g. `--grid=-1:1:0.1`.

Exit codes: 0 success, 1 unexpected failure, 2 unreadable or unwritable
files, 3 incompatible checkpoints, 4 invalid arguments or recipe, 5 remote
service or evaluation failure, 6 invalid dataset.
"""

import argparse
import json
import logging
import os
import sys

from pydantic import BaseModel, ValidationError

from .config import GlobalConfig
from .dataset import (LEVELS, DatasetException, SplitSpec, TemplateException, create_personas, generate_records,
                      load_dataset, load_templates, render_prompt, save_dataset, split_dataset, validate_dataset)
from .editing import (AlignmentVector, IncompatibleCheckpointException, InvalidAlignmentVectorException,
                      MergeRecipe, Provenance, RecipeException, extract_av, stream_merge)
from .evaluation import ScoringFailedException, judge_accuracy, preference_accuracy
from .remote import GenerationClient, JudgeClient, RemoteException
from .scorer import RemoteScorer, TinyLM, TinyLMScorer
from .search import (CoefficientGrid, CostModel, SearchException, SearchJournal, coefficient_range, estimate_cost,
                     grid_search, parse_grid, sweep_lambda)
from .tensor_store import CheckpointFormatException, checkpoint_digest, load_checkpoint, summarize
from .version import __version__

_log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_IO = 2
EXIT_INCOMPATIBLE = 3
EXIT_USAGE = 4
EXIT_REMOTE = 5
EXIT_DATASET = 6

NETCDF_FORMAT = "NETCDF3_64BIT"

_handler = None


class UsageException(ValueError):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad arguments, which is taken by I/O errors here
    def error(self, message):
        raise UsageException(f"{self.prog}: {message}")


#
# Result types that only exist on the command line
#


class ExtractResult(BaseModel):
    output: str
    digest: str
    provenance: Provenance


class MergeResult(BaseModel):
    output: str
    digest: str
    nb_terms: int


class SplitResult(BaseModel):
    train: str
    val: str
    test: str
    counts: dict[str, int]


class GenerateResult(BaseModel):
    output: str
    nb_personas: int
    nb_records: int


class PromptResult(BaseModel):
    prompt: str


#
# Helpers
#


def _configure_logging(verbosity):
    global _handler
    logger = logging.getLogger("avforge")
    if _handler is not None:
        logger.removeHandler(_handler)
    _handler = logging.StreamHandler(sys.stderr)
    _handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logger.addHandler(_handler)
    logger.setLevel({0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG))


def _emit(config, result, human):
    if config.output == "json":
        print(result.model_dump_json(indent=2))
    else:
        print(human)


def _fractions_line(fractions):
    return "  ".join(f"{level} {getattr(fractions, level):.3f}" for level in LEVELS)


def _pairs(items, what):
    """Parse repeated DOMAIN=VALUE arguments, keeping their order."""
    pairs = {}
    for item in items or []:
        domain, sep, value = item.partition("=")
        if not sep or not domain or not value:
            raise UsageException(f"{what} '{item}' is not of the form DOMAIN=VALUE.")
        if domain in pairs:
            raise UsageException(f"{what} for domain '{domain}' is given twice.")
        pairs[domain] = value
    return pairs


def _grid(text):
    try:
        return parse_grid(text)
    except ValueError as exc:
        raise UsageException(str(exc)) from exc


def _eval_workers(config):
    if config.scorer == "remote":
        return min(config.workers, config.max_in_flight)
    return config.workers


def _scorer(config, model_path):
    if config.scorer == "remote":
        return RemoteScorer(config.scorer_endpoint, retry=config.retry)
    if model_path is None:
        raise UsageException("--model is required with the tiny scorer.")
    return TinyLMScorer(TinyLM.from_checkpoint(model_path))


def _score_factory(config):
    if config.scorer != "tiny":
        raise UsageException("Merged checkpoints only exist in memory and can only be scored with the tiny scorer.")
    return TinyLMScorer.from_weights


#
# Commands
#


def cmd_extract(args, config):
    base = load_checkpoint(args.base)
    aligned = load_checkpoint(args.aligned)
    av = extract_av(aligned, base, args.domain, dtype_policy=args.dtype_policy, workers=config.workers)
    av.save(args.out)
    result = ExtractResult(output=args.out, digest=checkpoint_digest(av.delta), provenance=av.provenance)
    _emit(config, result, f"Wrote alignment vector for domain '{args.domain}' to {args.out}\ndigest {result.digest}")


def cmd_merge(args, config):
    recipe = MergeRecipe.from_file(args.recipe)
    stream_merge(recipe.to_spec(), recipe.output, workers=config.workers)
    result = MergeResult(
        output=recipe.output,
        digest=checkpoint_digest(load_checkpoint(recipe.output)),
        nb_terms=len(recipe.terms),
    )
    _emit(config, result, f"Wrote {result.output}\ndigest {result.digest}")


def cmd_sweep(args, config):
    grid = _grid(args.grid)
    score_factory = _score_factory(config)
    base = load_checkpoint(args.base)
    av = AlignmentVector.load(args.av)
    records = load_dataset(args.dataset)
    if args.keep_dir is not None:
        os.makedirs(args.keep_dir, exist_ok=True)
    journal = None if args.journal is None else SearchJournal(args.journal)
    report = sweep_lambda(base, av, grid, records, score_factory, journal=journal, workers=config.workers,
                          keep_dir=args.keep_dir)
    if args.netcdf is not None:
        report.to_dataset().to_netcdf(args.netcdf, format=NETCDF_FORMAT)
    lines = [f"Sweep of '{report.domain}' ({len(records)} records)"]
    lines += [f"{row.coefficient:+.2f}  {_fractions_line(row.fractions)}  dominant {row.dominant}"
              for row in report.rows]
    _emit(config, report, "\n".join(lines))


def cmd_eval(args, config):
    records = load_dataset(args.dataset)
    if args.limit is not None:
        records = records[:args.limit]
    if len(records) == 0:
        raise DatasetException(f"Dataset '{args.dataset}' has no records.")
    if args.judge:
        if not config.judge_endpoint:
            raise UsageException("Judging requires a judge endpoint (--judge-endpoint or AVFORGE_JUDGE_ENDPOINT).")
        if args.model is None:
            raise UsageException("--model is required for judging generated responses.")
        judge = JudgeClient(config.judge_endpoint, retry=config.retry)
        report = judge_accuracy(judge, TinyLM.from_checkpoint(args.model), records,
                                max_new_tokens=args.max_new_tokens,
                                workers=min(config.workers, config.max_in_flight))
        f = report.fractions
        human = (f"Judged {report.n_judged} of {report.n} samples ({report.n_errors} errors)\n"
                 f"expert {f.expert:.3f}  generic {f.generic:.3f}  avoidance {f.avoidance:.3f}")
    else:
        report = preference_accuracy(_scorer(config, args.model), records, workers=_eval_workers(config),
                                     instruction=args.instruction)
        human = (f"Preference accuracy of '{report.domain}' (n={report.n_samples})\n"
                 f"{_fractions_line(report.fractions)}\ndominant {report.dominant}")
    _emit(config, report, human)


def cmd_search(args, config):
    score_factory = _score_factory(config)
    av_paths = _pairs(args.av, "--av")
    dataset_paths = _pairs(args.dataset, "--dataset")
    targets = _pairs(args.target, "--target")
    domains = list(av_paths)
    if len(domains) == 0:
        raise UsageException("At least one --av DOMAIN=PATH is required.")
    if set(dataset_paths) != set(domains) or set(targets) != set(domains):
        raise UsageException("--av, --dataset and --target must name the same domains.")

    values = {domain: coefficient_range(-1.0, 1.0, 0.1) for domain in domains}
    for item in args.grid or []:
        domain, sep, text = item.rpartition("=")
        if not sep:
            values = {d: _grid(text) for d in domains}
        elif domain not in values:
            raise UsageException(f"--grid names unknown domain '{domain}'.")
        else:
            values[domain] = _grid(text)
    try:
        grid = CoefficientGrid(values=values)
    except ValidationError as exc:
        raise UsageException(str(exc)) from exc

    base = load_checkpoint(args.base)
    avs = {domain: AlignmentVector.load(path) for domain, path in av_paths.items()}
    datasets = {domain: load_dataset(dataset_paths[domain]) for domain in domains}
    journal = None if args.journal is None else SearchJournal(args.journal)
    result = grid_search(base, avs, grid, targets, datasets, score_factory, mode=args.mode, journal=journal,
                         workers=config.workers)
    if args.netcdf is not None:
        result.to_dataset().to_netcdf(args.netcdf, format=NETCDF_FORMAT)
    lines = [f"{len(result.satisfying)} of {len(result.cells)} cells satisfy "
             + ", ".join(f"{d}={result.targets[d]}" for d in domains)]
    if result.best is not None:
        lines.append(f"best {result.best.cell} (objective {result.best.objective:.3f})")
    _emit(config, result, "\n".join(lines))


def cmd_cost(args, config):
    model = CostModel(p=args.levels, D=args.domains, train_hours_per_run=args.train_hours,
                      eval_seconds_per_cell=args.eval_seconds)
    grid = None
    if args.grid is not None:
        values = _grid(args.grid)
        grid = CoefficientGrid(values={f"domain{i}": values for i in range(args.domains)})
    report = estimate_cost(model, grid)
    human = "\n".join(
        [
            f"joint training runs   {report.joint_training_runs}",
            f"AV training runs      {report.av_training_runs}",
            f"training reduction    {report.training_reduction:g}",
            f"joint training        {report.joint_hours:g} h",
            f"AV training           {report.av_training_hours:g} h",
            f"search cells          {report.cell_count}",
            f"search                {report.search_hours:.2f} h",
            f"speedup               {report.speedup:.2f}",
        ]
    )
    _emit(config, report, human)


def cmd_dataset_validate(args, config):
    report = validate_dataset(args.path)
    lines = [f"{report.path}: {report.n_records} records, " + ("passed" if report.passed else "FAILED")]
    lines += [f"  {domain}: {count}" for domain, count in report.counts.items()]
    lines += [f"  line {e.line}: {e.kind} {e.field} {e.message}".rstrip() for e in report.errors]
    _emit(config, report, "\n".join(lines))
    return EXIT_OK if report.passed else EXIT_DATASET


def cmd_dataset_split(args, config):
    records = load_dataset(args.path)
    split = split_dataset(records, SplitSpec(seed=args.seed))
    os.makedirs(args.out_dir, exist_ok=True)
    paths = {}
    for part in ("train", "val", "test"):
        paths[part] = os.path.join(args.out_dir, f"{part}.jsonl")
        save_dataset(getattr(split, part), paths[part])
    result = SplitResult(**paths, counts={part: len(getattr(split, part)) for part in paths})
    _emit(config, result, "  ".join(f"{part} {count}" for part, count in result.counts.items()))


def cmd_dataset_render(args, config):
    try:
        templates = load_templates(args.templates)
        prompt = render_prompt(args.level, args.domain, args.query, args.num_paras, templates)
    except ValueError as exc:
        raise UsageException(str(exc)) from exc
    _emit(config, PromptResult(prompt=prompt), prompt)


def _read_personas(path):
    personas = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                item = json.loads(line)
                personas.append((item["persona"], item.get("query")))
            else:
                personas.append(line)
    return personas


def cmd_dataset_generate(args, config):
    if not config.generator_endpoint:
        raise UsageException(
            "Generation requires an endpoint (--generator-endpoint or AVFORGE_GENERATOR_ENDPOINT)."
        )
    if (args.personas is None) == (args.create_personas is None):
        raise UsageException("Pass exactly one of --personas and --create-personas.")
    templates = load_templates(args.templates)
    llm = GenerationClient(config.generator_endpoint, retry=config.retry, max_tokens=args.max_tokens)
    if args.personas is not None:
        personas, source = _read_personas(args.personas), "personahub"
    else:
        personas = create_personas(llm, args.domain, roots=args.create_personas, depth=args.depth,
                                   rounds=args.rounds, templates=templates)
        source = "createpersona"
    records = generate_records(llm, personas, args.domain, count=args.count, source=source, seed=args.seed,
                               workers=min(config.workers, config.max_in_flight), templates=templates)
    save_dataset(records, args.out)
    result = GenerateResult(output=args.out, nb_personas=len(personas), nb_records=len(records))
    _emit(config, result, f"Wrote {result.nb_records} records from {result.nb_personas} personas to {args.out}")


def cmd_inspect(args, config):
    checkpoint = load_checkpoint(args.path)
    summary = summarize(checkpoint)
    lines = [f"{len(checkpoint)} tensors, {summary.parameter_count} parameters", f"digest {summary.digest}"]
    lines += [f"  {key} = {value}" for key, value in checkpoint.metadata.items()]
    lines += [
        f"{t.name:40s} {t.dtype:5s} {str(t.shape):16s} min {t.min:.4g} max {t.max:.4g} mean {t.mean:.4g} "
        f"l2 {t.l2_norm:.4g}"
        for t in summary.tensors
    ]
    _emit(config, summary, "\n".join(lines))


#
# Parser
#


def build_parser():
    common = _ArgumentParser(add_help=False)
    common.add_argument("--output", choices=("human", "json"), default=None, help="Result format on stdout")
    common.add_argument("-v", "--verbose", action="count", default=0, help="More log output (repeatable)")
    common.add_argument("--workers", type=int, default=None, help="Worker threads (default: AVFORGE_WORKERS or 1)")
    common.add_argument("--scorer", choices=("tiny", "remote"), default=None, help="Scoring backend")
    common.add_argument("--endpoint", default=None, help="Remote scorer URL (default: AVFORGE_SCORER_ENDPOINT)")

    parser = _ArgumentParser(prog="avforge", description="Extract, merge and evaluate alignment vectors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="name", required=True)

    p = commands.add_parser("extract", parents=[common], help="Subtract a base checkpoint from an aligned one")
    p.add_argument("--base", required=True)
    p.add_argument("--aligned", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dtype-policy", choices=("keep", "force-f32"), default="keep")
    p.set_defaults(command=cmd_extract)

    p = commands.add_parser("merge", parents=[common], help="Apply alignment vectors as described by a recipe")
    p.add_argument("recipe")
    p.set_defaults(command=cmd_merge)

    p = commands.add_parser("sweep", parents=[common], help="Preference accuracy over a coefficient grid")
    p.add_argument("--base", required=True)
    p.add_argument("--av", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--grid", default="-1:1:0.1", help="start:stop:step")
    p.add_argument("--journal", default=None, help="JSON-lines journal for resuming")
    p.add_argument("--keep-dir", default=None, help="Save every merged checkpoint into this directory")
    p.add_argument("--netcdf", default=None, help="Also write the sweep as netCDF")
    p.set_defaults(command=cmd_sweep)

    p = commands.add_parser("eval", parents=[common], help="Preference accuracy or judged generation accuracy")
    p.add_argument("--model", default=None, help="Checkpoint (tiny scorer and judging)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--limit", type=int, default=None, help="Only use the first LIMIT records")
    p.add_argument("--instruction", default=None, help="Instruction placed before every query")
    p.add_argument("--judge", action="store_true", help="Generate responses and let a judge label them")
    p.add_argument("--judge-endpoint", default=None, help="Judge URL (default: AVFORGE_JUDGE_ENDPOINT)")
    p.add_argument("--max-new-tokens", type=int, default=256)
    p.set_defaults(command=cmd_eval)

    p = commands.add_parser("search", parents=[common], help="Multi-domain coefficient grid search")
    p.add_argument("--base", required=True)
    p.add_argument("--av", action="append", required=True, metavar="DOMAIN=PATH")
    p.add_argument("--dataset", action="append", required=True, metavar="DOMAIN=PATH")
    p.add_argument("--target", action="append", required=True, metavar="DOMAIN=LEVEL")
    p.add_argument("--grid", action="append", metavar="[DOMAIN=]START:STOP:STEP")
    p.add_argument("--mode", choices=("exhaustive", "hierarchical"), default="exhaustive")
    p.add_argument("--journal", default=None, help="JSON-lines journal for resuming")
    p.add_argument("--netcdf", default=None, help="Also write the evaluated cells as netCDF")
    p.set_defaults(command=cmd_search)

    p = commands.add_parser("cost", parents=[common], help="Training and search budget")
    p.add_argument("--levels", type=int, default=3, help="Behavior levels per domain")
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--train-hours", type=float, default=72.0, help="Hours per training run")
    p.add_argument("--eval-seconds", type=float, default=60.0, help="Seconds per evaluated cell")
    p.add_argument("--grid", default=None, help="start:stop:step for every domain (default -1:1:0.1)")
    p.set_defaults(command=cmd_cost)

    p = commands.add_parser("dataset", help="Preference dataset tools")
    actions = p.add_subparsers(dest="action", required=True)

    q = actions.add_parser("validate", parents=[common])
    q.add_argument("path")
    q.set_defaults(command=cmd_dataset_validate)

    q = actions.add_parser("split", parents=[common])
    q.add_argument("path")
    q.add_argument("--out-dir", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(command=cmd_dataset_split)

    q = actions.add_parser("render", parents=[common])
    q.add_argument("--level", choices=LEVELS, required=True)
    q.add_argument("--domain", required=True)
    q.add_argument("--query", required=True)
    q.add_argument("--num-paras", type=int, default=2)
    q.add_argument("--templates", default=None, help="Template configuration (default: packaged)")
    q.set_defaults(command=cmd_dataset_render)

    q = actions.add_parser("generate", parents=[common])
    q.add_argument("--domain", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--personas", default=None, help="One persona per line, or JSON lines with persona and query")
    q.add_argument("--create-personas", type=int, default=None, metavar="ROOTS",
                   help="Create personas hierarchically, starting from ROOTS root personas per round")
    q.add_argument("--depth", type=int, default=1)
    q.add_argument("--rounds", type=int, default=3)
    q.add_argument("--count", type=int, default=None, help="Use at most COUNT personas")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--max-tokens", type=int, default=1024)
    q.add_argument("--templates", default=None)
    q.add_argument("--generator-endpoint", default=None, help="Generation URL (default: AVFORGE_GENERATOR_ENDPOINT)")
    q.set_defaults(command=cmd_dataset_generate)

    p = commands.add_parser("inspect", parents=[common], help="Tensor statistics and digest of a checkpoint")
    p.add_argument("path")
    p.set_defaults(command=cmd_inspect)

    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        config = GlobalConfig.from_env(
            scorer=args.scorer,
            scorer_endpoint=args.endpoint,
            judge_endpoint=getattr(args, "judge_endpoint", None),
            generator_endpoint=getattr(args, "generator_endpoint", None),
            workers=args.workers,
            output=args.output,
        )
    except (UsageException, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    _configure_logging(args.verbose)
    try:
        return args.command(args, config) or EXIT_OK
    except IncompatibleCheckpointException as exc:
        _log.error(str(exc))
        print(exc.report.model_dump_json(), file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (UsageException, RecipeException, TemplateException, ValidationError) as exc:
        _log.error(str(exc))
        return EXIT_USAGE
    except DatasetException as exc:
        _log.error(str(exc))
        return EXIT_DATASET
    except (RemoteException, ScoringFailedException, SearchException) as exc:
        _log.error(str(exc))
        return EXIT_REMOTE
    except (OSError, CheckpointFormatException, InvalidAlignmentVectorException) as exc:
        _log.error(str(exc))
        return EXIT_IO
    except Exception:
        _log.exception("Unexpected failure.")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
