'''python lab.py gen --config configs/quick.json --seed 7 --out runs/quick'''

import argparse
import dataclasses
import logging
import os
import sys
from typing import List, Optional

ROOT_DIR = os.path.dirname(os.path.abspath(__file__))
SRC_DIR = os.path.join(ROOT_DIR, "src")
if SRC_DIR not in sys.path:
    sys.path.insert(0, SRC_DIR)

import data_processor as dp  # noqa: E402
from bounds import ETA_REASON, BoundInputs, BoundsException, all_bounds, bound_for_model  # noqa: E402
from distshift import GenerativeConfig, algo_weights_for, apply_algo_shift, apply_problem_shift, divergence_report  # noqa: E402
from experiments import run_experiment, summarize  # noqa: E402
from expression import generate_problems  # noqa: E402
from lab_constants import LabConstants, LabRuntimeException, LabValidationException, ModelKind  # noqa: E402
from labeling import label, split  # noqa: E402
from metaheuristics import make_portfolio  # noqa: E402
from render import ChartRenderer, chart_series, scenarios_in, write_svg  # noqa: E402
from selector_models import SelectionData, TrainHyper, bindings_for, bound_inputs, build, evaluate, fit  # noqa: E402
from seeding import derive_seed  # noqa: E402

logger = logging.getLogger("LAB")

SUBCOMMANDS = ["gen", "label", "split", "train", "eval", "bounds", "divergence", "experiment", "plot"]


class LabArgumentParser(argparse.ArgumentParser):
    '''usage errors exit with the validation code'''
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ----------------------------
# Helpers
# ----------------------------

class Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.cfg = dp.load_config(args.config)
        self.seed = args.seed if args.seed is not None else 0
        self.out = args.out
        self.jobs = max(1, args.jobs)
        self.started = dp.now_iso()
        os.makedirs(self.out, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def record(self, outputs: List[str], inputs: List[str]):
        '''append one manifest entry per written artifact'''
        finished = dp.now_iso()
        for artifact in outputs:
            dp.append_manifest(artifact, dp.RunManifest(
                master_seed=self.seed, config=self.cfg.raw, inputs=inputs, outputs=outputs,
                started=self.started, finished=finished,
            ))
            logger.info(f"wrote {artifact}")

    def problems(self):
        table, _, _, L_max = dp.read_generator(self.path(dp.GENERATOR_FILE))
        return dp.read_problems(self.path(dp.PROBLEMS_FILE), table, L_max)

    def selection_inputs(self):
        problems = self.problems()
        portfolio = dp.read_portfolio(self.path(dp.PORTFOLIO_FILE))
        perf = dp.read_perf(self.path(dp.PERF_FILE))
        data_split = dp.read_split(self.path(dp.SPLIT_FILE))
        return SelectionData.from_instances(problems, portfolio), perf, data_split


# ----------------------------
# Subcommands
# ----------------------------

def cmd_gen(ctx: Context) -> int:
    g = ctx.cfg.gen
    table = g.table()
    problems = generate_problems(table, g.n_problems, g.dim, g.max_depth, ctx.seed, jobs=ctx.jobs,
                                 vocab=table, L_max=g.L_max, lo=g.lo, hi=g.hi)
    dp.write_problems(ctx.path(dp.PROBLEMS_FILE), problems)
    dp.write_generator(ctx.path(dp.GENERATOR_FILE), table, g.dim, g.max_depth, g.L_max)
    ctx.record([ctx.path(dp.PROBLEMS_FILE), ctx.path(dp.GENERATOR_FILE)], [])
    return 0


def cmd_label(ctx: Context) -> int:
    lc = ctx.cfg.label
    problems = ctx.problems()
    portfolio = make_portfolio(lc.n_algos, derive_seed(ctx.seed, "portfolio"), lc.iterations)
    matrix = label(problems, portfolio, lc.n_runs, ctx.seed, ctx.jobs)
    dp.write_portfolio(ctx.path(dp.PORTFOLIO_FILE), portfolio)
    dp.write_perf(ctx.path(dp.PERF_FILE), matrix)
    dp.write_labels(ctx.path(dp.LABELS_FILE), matrix)
    ctx.record([ctx.path(dp.PORTFOLIO_FILE), ctx.path(dp.PERF_FILE), ctx.path(dp.LABELS_FILE)],
               [ctx.path(dp.PROBLEMS_FILE)])
    return 0


def cmd_split(ctx: Context) -> int:
    problems = ctx.problems()
    matrix = dp.read_perf(ctx.path(dp.PERF_FILE))
    data_split = split(matrix, problems, ctx.cfg.split.test_fraction, ctx.seed)
    dp.write_split(ctx.path(dp.SPLIT_FILE), data_split)
    ctx.record([ctx.path(dp.SPLIT_FILE)], [ctx.path(dp.PROBLEMS_FILE), ctx.path(dp.PERF_FILE)])
    return 0


def cmd_train(ctx: Context) -> int:
    tc = ctx.cfg.train
    try:
        kind = tc.kind
    except KeyError as e:
        raise LabValidationException(f"Unknown model kind {e}") from e
    data, perf, data_split = ctx.selection_inputs()
    bindings = bindings_for(kind, data, data_split, tc.gamma_margin, tc.transductive)
    model = build(kind, bindings, tc.width, derive_seed(ctx.seed, "model"))
    model = fit(model, data, data_split, perf, TrainHyper(tc.epochs, tc.lr, derive_seed(ctx.seed, "train")))
    dp.write_model(ctx.path(dp.MODEL_FILE), model)
    ctx.record([ctx.path(dp.MODEL_FILE)], [ctx.path(dp.SPLIT_FILE), ctx.path(dp.PERF_FILE)])
    return 0


def cmd_eval(ctx: Context) -> int:
    data, perf, data_split = ctx.selection_inputs()
    model = dp.read_model(ctx.path(dp.MODEL_FILE))
    result = evaluate(model, data, data_split, perf, fallback=True)
    dp.write_json(ctx.path(dp.EVAL_FILE), {"model": model.kind.kind_name, **result._asdict()})
    logger.info(f"{model.kind.kind_name}: error_S={result.error_S:.4f} error_T={result.error_T:.4f} gap={result.gap:+.4f}")
    ctx.record([ctx.path(dp.EVAL_FILE)], [ctx.path(dp.MODEL_FILE)])
    return 0


def cmd_bounds(ctx: Context) -> int:
    bc = ctx.cfg.bounds
    if bc.inputs is not None:
        inputs = BoundInputs.from_dict({"delta": bc.delta, "chi2": bc.chi2, "p_transductive": bc.p_transductive, **bc.inputs})
        error_S = bc.error_S
        try:
            kind = ModelKind.from_name(bc.model)
        except KeyError as e:
            raise LabValidationException(f"Unknown model kind {e}") from e
        sources = []
    else:
        data, perf, data_split = ctx.selection_inputs()
        model = dp.read_model(ctx.path(dp.MODEL_FILE))
        kind = model.kind
        error_S = evaluate(model, data, data_split, perf).error_S
        inputs = bound_inputs(model, data, data_split, bc.delta, bc.chi2)
        sources = [ctx.path(dp.MODEL_FILE), ctx.path(dp.SPLIT_FILE)]
    primary = bound_for_model(kind, inputs, error_S)
    if not primary.applicable and primary.reason == ETA_REASON:
        raise BoundsException(f"transductive bound precondition violated: {ETA_REASON} (eta = {inputs.eta:.4g})")
    dp.write_bounds(ctx.path(dp.BOUNDS_FILE), inputs, error_S, primary, all_bounds(inputs, error_S))
    shown = "not applicable" if primary.value is None else f"{primary.value:.6g}"
    logger.info(f"{kind.kind_name} {primary.kind}: {shown}")
    ctx.record([ctx.path(dp.BOUNDS_FILE)], sources)
    return 0


def cmd_divergence(ctx: Context) -> int:
    dc, lc = ctx.cfg.divergence, ctx.cfg.label
    gen_path = ctx.path(dp.GENERATOR_FILE)
    if os.path.exists(gen_path):
        table, dim, max_depth, _ = dp.read_generator(gen_path)
    else:
        g = ctx.cfg.gen
        table, dim, max_depth = g.table(), g.dim, g.max_depth
    universe = list(range(lc.n_algos + dc.n_new))
    train_ids = universe[:lc.n_algos]
    test_ids = apply_algo_shift(train_ids, dc.n_new, universe)
    train_table = apply_problem_shift(table, dc.shift_fraction, dc.shift_scale, ctx.seed)
    P_S = GenerativeConfig(train_table, algo_weights_for(train_ids, universe), dim, max_depth)
    P_T = GenerativeConfig(table, algo_weights_for(test_ids, universe), dim, max_depth)
    report = divergence_report(P_T, P_S, dc.n_mc, ctx.seed, dc.eps, ctx.jobs)
    dp.write_shift(ctx.path(dp.SHIFT_FILE), P_S, P_T, report)
    ctx.record([ctx.path(dp.SHIFT_FILE)], [gen_path] if os.path.exists(gen_path) else [])
    return 0


def cmd_experiment(ctx: Context) -> int:
    exp = ctx.cfg.experiment
    if exp is None:
        raise LabValidationException('experiment needs an "experiment" section in --config')
    if ctx.args.seed is not None:
        exp = dataclasses.replace(exp, master_seed=ctx.args.seed)
    ctx.seed = exp.master_seed
    path = ctx.path(dp.RESULTS_FILE)
    done = dp.existing_keys(path)
    if done:
        logger.info(f"resuming: {len(done)} rows already in {path}")
    writer = dp.ResultsWriter(path)
    run_experiment(exp, ctx.jobs, done, writer)
    rows = [r for r in dp.read_results(path) if r.scenario == exp.scenario.value]
    if rows:
        for model, rho in summarize(rows).trends.items():
            logger.info(f"{model}: Spearman rho(accuracy, sweep) = {rho:.3f}")
    ctx.record([path], [])
    return 0


def cmd_plot(ctx: Context) -> int:
    path = ctx.args.results or ctx.path(dp.RESULTS_FILE)
    rows = dp.read_results(path)
    wanted = [ctx.args.scenario] if ctx.args.scenario else scenarios_in(rows)
    outputs = []
    for scenario in wanted:
        outputs.append(write_svg(rows, scenario, ctx.path(f"{scenario}.svg"), ctx.args.metric))
        if ctx.args.png or ctx.args.render:
            chart = ChartRenderer(chart_series(rows, scenario, ctx.args.metric), scenario)
            if ctx.args.png:
                outputs.append(chart.save_png(ctx.path(f"{scenario}.png")))
            if ctx.args.render:
                try:
                    while chart.render_once():
                        pass
                finally:
                    chart.close()
    ctx.record(outputs, [path])
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "label": cmd_label,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "bounds": cmd_bounds,
    "divergence": cmd_divergence,
    "experiment": cmd_experiment,
    "plot": cmd_plot,
}


def build_parser() -> LabArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="master seed (all randomness derives from it)")
    common.add_argument("--out", default="out", help="artifact directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes; never changes results")

    ap = LabArgumentParser(prog="lab.py", description="algorithm-selection generalization lab")
    ap.add_argument("--version", action="version", version=LabConstants.TOOL_VERSION)
    sub = ap.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=LabArgumentParser)
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "plot":
            p.add_argument("--results", default=None, help="results.csv (default: <out>/results.csv)")
            p.add_argument("--scenario", default=None, help="only this scenario")
            p.add_argument("--metric", default="accuracy", choices=["accuracy", "gap"])
            p.add_argument("--render", action="store_true", help="open a pygame preview window")
            p.add_argument("--png", action="store_true", help="also save a PNG through pygame")
    return ap


def cli(argv: Optional[List[str]] = None) -> int:
    '''parse and run; 0 ok, 1 validation error, 2 runtime error'''
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](Context(args))
    except LabValidationException as e:
        logger.error(str(e))
        return 1
    except LabRuntimeException as e:
        logger.error(str(e))
        return 2
    except (ArithmeticError, MemoryError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2


def main():
    logging.basicConfig(level=logging.INFO, format="[%(name)s] %(message)s")
    sys.exit(cli())


if __name__ == "__main__":
    main()
