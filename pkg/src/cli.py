"""VoltPilot command-line interface"""
import argparse
import logging
from datetime import datetime
from pathlib import Path

from .certify import certify_params, MODES
from .config import (config_hash, load_config, load_params, load_scenario_config,
                     save_params)
from .control import ControllerParams
from .engine import compare, cost, rollout
from .errors import (ConfigError, DimensionError, DivergenceError, FormatError, InfeasibleError, ModelError,
                     NumericalError, RangeError, TopologyError)
from .grid import FeederModel, build_feeder
from .ingest import load_feeder_file, write_basis_table, write_trace_csv
from .models import finish_run, get_session, init_db, record_epochs, registry_status, start_run
from .reports import (provenance, write_certify_report, write_comparison, write_plot_data, write_summary,
                      write_train_log, write_trajectory)
from .scenario import LoadScenario, ScenarioSampler, phi_bound
from .train import fit

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONDITION = 1
EXIT_INPUT = 2
EXIT_DIVERGED = 3

INPUT_ERRORS = (FileNotFoundError, FormatError, TopologyError, ModelError, ConfigError, DimensionError,
                InfeasibleError, RangeError, NumericalError)


class UncertifiedError(Exception):
    """Parameters fail certification and --allow-uncertified was not given"""


def format_date_delta(date_str):
    """Format date delta as human-readable string"""
    if not date_str:
        return "Never"
    try:
        delta = datetime.utcnow() - datetime.fromisoformat(date_str)
    except ValueError:
        return "Unknown"
    minutes = int(delta.total_seconds()) // 60
    if minutes < 1:
        return "Just now"
    if minutes < 60:
        return f"{minutes} minute{'s' if minutes > 1 else ''} ago"
    hours = minutes // 60
    if delta.days < 1:
        return f"{hours} hour{'s' if hours > 1 else ''} ago"
    return f"{delta.days} day{'s' if delta.days > 1 else ''} ago"


class Context:
    """Resolved config, feeder model and provenance shared by the subcommands"""

    def __init__(self, args):
        self.args = args
        self.config = load_config(args.config)
        if args.seed is not None:
            self.config.scenario.seed = args.seed
        if args.feeder:
            self.config.feeder.path = args.feeder
        if args.out:
            self.config.output.directory = args.out
        self._model = None

    @property
    def out_dir(self) -> Path:
        return Path(self.config.output.directory)

    @property
    def seed(self) -> int:
        return self.config.seed

    def finalize(self):
        """Validate after command-specific overrides; the hash covers the final config"""
        self.config.validate()
        self.hash = config_hash(self.config)
        self.meta = provenance(self.hash, self.seed)

    @property
    def model(self) -> FeederModel:
        if self._model is None:
            topology = load_feeder_file(self.config.feeder.resolved_path())
            self._model = build_feeder(topology, self.config.feeder.scale_factor)
        return self._model

    def sampler(self, purpose: str, horizon=None) -> ScenarioSampler:
        return ScenarioSampler(self.model, self.config.scenario, purpose, horizon)


def _certify_or_refuse(ctx: Context, params: ControllerParams, scenario: LoadScenario, label: str):
    """Certification report for params; raises UncertifiedError unless --allow-uncertified"""
    report = certify_params(ctx.model, params, scenario.phi, phi_bound(scenario))
    if not report.passed:
        message = f"{label} parameters fail certification ({', '.join(report.failed_conditions())})"
        if not ctx.args.allow_uncertified:
            raise UncertifiedError(f"{message}; pass --allow-uncertified to run anyway")
        logger.warning(message)
    return report


def cmd_certify(ctx: Context):
    """Check the stability conditions for a parameter file"""
    ctx.finalize()
    params = load_params(ctx.args.params)
    scenario = ctx.sampler('scenario').draw(0)
    print(f"Certifying {ctx.args.params} ({ctx.args.mode}, {scenario.horizon + 1} basis samples)...")
    report = certify_params(ctx.model, params, scenario.phi, phi_bound(scenario), mode=ctx.args.mode)
    paths = write_certify_report(ctx.out_dir, report, ctx.meta)

    if report.passed:
        print(f"\n✓ Parameters certified!")
    else:
        print(f"\n✗ Certification failed: {', '.join(report.failed_conditions())}")
    print(f"  Max spectral radius: {report.spectral_radius_max:.6g}")
    print(f"  Contraction bound: {report.contraction_bound:.6g}")
    for warning in report.warnings:
        print(f"  Warning: {warning}")
    print(f"  Report: {paths['text']}")
    summary = {'passed': report.passed, 'failed': report.failed_conditions(),
               'spectral_radius_max': report.spectral_radius_max}
    return (EXIT_OK if report.passed else EXIT_CONDITION), summary


def cmd_simulate(ctx: Context):
    """Roll out one test scenario and write trajectory and plot data"""
    args = ctx.args
    if args.horizon is not None:
        ctx.config.scenario.horizon = args.horizon
    if args.clamp:
        ctx.config.controller.clamp = True
    ctx.finalize()

    param_files = [('primary', args.params)] + ([('secondary', args.linear_params)] if args.linear_params else [])
    scenario = ctx.sampler('test').draw(args.index)
    runs = {}
    for label, path in param_files:
        params = load_params(path)
        _certify_or_refuse(ctx, params, scenario, f"{params.controller} ({path})")
        name = params.controller if params.controller not in runs else f"{params.controller}_{label}"
        runs[name] = params

    print(f"Simulating {scenario.horizon} steps on {ctx.model.n} buses...")
    trajectories, costs = {}, {}
    for name, params in runs.items():
        traj = rollout(ctx.model, scenario, params.controller, params, clamp=ctx.config.controller.clamp,
                       p_convention=ctx.config.controller.p_convention)
        trajectories[name] = traj
        costs[name] = cost(traj, ctx.config.cost)
        write_trajectory(ctx.out_dir, traj, costs[name], ctx.meta, stem=f"trajectory_{name}",
                         extra={'scenario_seed': scenario.seed})
    first = next(iter(trajectories))
    write_trajectory(ctx.out_dir, trajectories[first], costs[first], ctx.meta, extra={'scenario_seed': scenario.seed})
    if ctx.config.output.emit_plot_data and not args.no_plot_data:
        write_plot_data(ctx.out_dir, trajectories, scenario, ctx.meta)

    print(f"\n✓ Simulation complete!")
    for name, value in costs.items():
        print(f"  {name} total cost: {value:.6g} (saturated steps: {trajectories[name].saturation_count})")
    print(f"  Output: {ctx.out_dir}")
    return EXIT_OK, {'total_cost': costs, 'horizon': scenario.horizon}


def cmd_train(ctx: Context):
    """Train controller parameters with projected gradient descent"""
    args = ctx.args
    train = ctx.config.train
    for attr, value in (('epochs', args.epochs), ('batch_size', args.batch), ('horizon', args.horizon),
                        ('learning_rate', args.lr), ('controller', args.controller)):
        if value is not None:
            setattr(train, attr, value)
    if args.epsilon is not None:
        ctx.config.controller.epsilon = args.epsilon
    if args.scenario_config:
        seed = ctx.config.scenario.seed
        ctx.config.scenario = load_scenario_config(args.scenario_config)
        if args.seed is not None:
            ctx.config.scenario.seed = seed
    ctx.finalize()

    train_config = ctx.config.train_config(ctx.model)
    sampler = ctx.sampler('scenario', horizon=train_config.horizon)
    print(f"Training {train_config.controller} controller on {ctx.model.n} buses "
          f"({train_config.epochs} epochs, batch {train_config.batch_size}, eps={train_config.epsilon:.4g})...")
    params, log = fit(ctx.model, train_config, sampler)

    params_path = Path(args.params_out) if args.params_out else ctx.out_dir / f"params_{train_config.controller}.yaml"
    log_path = Path(args.log) if args.log else ctx.out_dir / f"train_log_{train_config.controller}.csv"
    save_params(params_path, params, provenance=ctx.meta)
    frame = log.to_frame()
    write_train_log(log_path, frame, ctx.meta)
    ctx.train_log = frame

    print(f"\n✓ Training complete!")
    if len(frame):
        print(f"  First epoch loss: {frame['loss'].iloc[0]:.6g}")
        print(f"  Best loss: {frame['loss'].min():.6g}")
    print(f"  Parameters: {params_path}")
    print(f"  Log: {log_path}")
    summary = {'params': str(params_path), 'epochs': len(frame),
               'best_loss': float(frame['loss'].min()) if len(frame) else None}
    return EXIT_OK, summary


def cmd_evaluate(ctx: Context):
    """Compare adaptive and linear parameters on the test set"""
    args = ctx.args
    if args.test_size is not None:
        ctx.config.evaluate.test_size = args.test_size
    if args.ratios:
        ctx.config.evaluate.ratios = list(args.ratios)
    ctx.finalize()

    params_adaptive = load_params(args.adaptive)
    params_linear = load_params(args.linear)
    scenarios = ctx.sampler('test').test_set(ctx.config.evaluate.test_size)
    uncertified = []
    for name, params in (('adaptive', params_adaptive), ('linear', params_linear)):
        if not _certify_or_refuse(ctx, params, scenarios[0], name).passed:
            uncertified.append(name)

    print(f"Evaluating on {len(scenarios)} test scenarios, ratios {ctx.config.evaluate.ratios}...")
    report = compare(ctx.model, scenarios, params_adaptive, params_linear, ctx.config.cost,
                     ratios=ctx.config.evaluate.ratios, clamp=ctx.config.controller.clamp,
                     workers=ctx.config.train.workers, p_convention=ctx.config.controller.p_convention,
                     uncertified=uncertified)
    write_comparison(ctx.out_dir, report, ctx.meta)

    print(f"\n✓ Evaluation complete!")
    for row in report.summary.itertuples(index=False):
        print(f"  ratio {row.ratio:g}: adaptive {row.adaptive_mean:.6g} ± {row.adaptive_std:.3g}, "
              f"linear {row.linear_mean:.6g} ± {row.linear_std:.3g} ({row.improvement_pct:+.2f}%)")
    for note in report.notes:
        print(f"  Note: {note}")
    return EXIT_OK, {'summary': report.summary.to_dict(orient='records')}


def cmd_gen_scenario(ctx: Context):
    """Write a generated scenario as a net-load trace plus its basis table"""
    args = ctx.args
    if args.horizon is not None:
        ctx.config.scenario.horizon = args.horizon
    ctx.finalize()

    scenario = ctx.sampler(args.purpose).draw(args.index)
    header = [f"{key}={value}" for key, value in ctx.meta.items()] + [f"scenario_seed={scenario.seed}"]
    trace_path = ctx.out_dir / 'scenario_trace.csv'
    write_trace_csv(trace_path, scenario.p, header_lines=header)

    basis_path = ctx.out_dir / 'scenario_basis.csv'
    write_basis_table(basis_path, scenario.phi, scenario.dims, header)

    write_summary(ctx.out_dir / 'scenario.yaml', {
        'purpose': args.purpose,
        'index': args.index,
        'scenario_seed': scenario.seed,
        'horizon': scenario.horizon,
        'dims': list(scenario.dims),
        'c': scenario.c,
        'q0': scenario.q0,
        'frequencies': scenario.basis.frequencies,
    }, ctx.meta)

    print(f"\n✓ Scenario written!")
    print(f"  Trace: {trace_path}")
    print(f"  Basis: {basis_path}")
    return EXIT_OK, {'trace': str(trace_path), 'scenario_seed': scenario.seed}


def cmd_status(args):
    """Show run registry status"""
    engine = init_db(str(_db_path(args)))
    session = get_session(engine)
    status = registry_status(session)

    print("VoltPilot Status")
    print("=" * 50)
    print(f"\nRuns: {status['total']}")
    for (command, state), count in sorted(status['counts'].items()):
        print(f"   {command} [{state}]: {count}")
    if status['recent']:
        print("\nRecent runs:")
        for run in status['recent']:
            print(f"   #{run.id} {run.command} seed={run.seed} exit={run.exit_code} "
                  f"({format_date_delta(run.created_at.isoformat() if run.created_at else None)})")
    for key in sorted(status['metadata']):
        if key.startswith('last_'):
            print(f"\nLast {key[5:]}: {format_date_delta(status['metadata'][key])}")
    return EXIT_OK


def _db_path(args) -> Path:
    if args.db:
        return Path(args.db)
    return Path(args.out or 'out') / 'voltpilot.db'


COMMANDS = {
    'certify': cmd_certify,
    'simulate': cmd_simulate,
    'train': cmd_train,
    'evaluate': cmd_evaluate,
    'gen-scenario': cmd_gen_scenario,
}


def run_command(args) -> int:
    """Run one subcommand, map exceptions onto exit codes and record the run"""
    session, run, ctx = None, None, None
    summary = {}
    try:
        ctx = Context(args)
        engine = init_db(str(_db_path(args)))
        session = get_session(engine)
        run = start_run(session, args.command, config_hash(ctx.config), ctx.seed,
                        str(ctx.config.feeder.resolved_path()))
        code, summary = COMMANDS[args.command](ctx)
        if args.command == 'train' and getattr(ctx, 'train_log', None) is not None:
            record_epochs(session, run, ctx.train_log)
    except UncertifiedError as e:
        print(f"Error: {e}")
        code = EXIT_CONDITION
    except DivergenceError as e:
        print(f"Error: run diverged: {e}")
        code, summary = EXIT_DIVERGED, {'step': e.step, 'scenario_index': e.scenario_index}
    except INPUT_ERRORS as e:
        print(f"Error: {e}")
        code = EXIT_INPUT
    if session is not None and run is not None:
        if ctx is not None and hasattr(ctx, 'hash'):
            run.config_hash = ctx.hash
        finish_run(session, run, code, summary)
        session.close()
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='VoltPilot - Adaptive voltage control for distribution feeders')
    parser.add_argument('--feeder', help='Feeder line-data file (default: bundled IEEE 33-bus)')
    parser.add_argument('--config', help='Experiment config (YAML)')
    parser.add_argument('--out', help='Output directory (default: out)')
    parser.add_argument('--seed', type=int, help='Root seed (overrides scenario.seed)')
    parser.add_argument('--allow-uncertified', action='store_true',
                        help='Run parameters that fail certification')
    parser.add_argument('--db', help='Path to run registry database (default: <out>/voltpilot.db)')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='-v for INFO, -vv for DEBUG')

    subparsers = parser.add_subparsers(dest='command', help='Command')

    # Certify command
    certify_parser = subparsers.add_parser('certify', help='Check stability conditions for a parameter file')
    certify_parser.add_argument('params', help='Controller parameter file')
    certify_parser.add_argument('--mode', choices=MODES, default='centralized',
                                help='centralized, decentralized (also checks the implication) or both')

    # Simulate command
    simulate_parser = subparsers.add_parser('simulate', help='Roll out a test scenario')
    simulate_parser.add_argument('params', help='Controller parameter file')
    simulate_parser.add_argument('--linear-params', help='Second parameter file simulated on the same scenario')
    simulate_parser.add_argument('--horizon', type=int, help='Number of control steps')
    simulate_parser.add_argument('--index', type=int, default=0, help='Test scenario index')
    simulate_parser.add_argument('--clamp', action='store_true', help='Clip actions to u_max')
    simulate_parser.add_argument('--no-plot-data', action='store_true', help='Skip the per-figure plot CSVs')

    # Train command
    train_parser = subparsers.add_parser('train', help='Train controller parameters')
    train_parser.add_argument('--controller', choices=['adaptive', 'linear'])
    train_parser.add_argument('--epochs', type=int)
    train_parser.add_argument('--batch', type=int)
    train_parser.add_argument('--horizon', type=int)
    train_parser.add_argument('--lr', type=float)
    train_parser.add_argument('--epsilon', type=float)
    train_parser.add_argument('--scenario-config', help='YAML file with scenario keys')
    train_parser.add_argument('--params-out', help='Parameter file to write (default: <out>/params_<controller>.yaml)')
    train_parser.add_argument('--log', help='Train log CSV (default: <out>/train_log_<controller>.csv)')

    # Evaluate command
    evaluate_parser = subparsers.add_parser('evaluate', help='Compare adaptive and linear parameters')
    evaluate_parser.add_argument('adaptive', help='Adaptive controller parameter file')
    evaluate_parser.add_argument('linear', help='Linear controller parameter file')
    evaluate_parser.add_argument('--test-size', type=int)
    evaluate_parser.add_argument('--ratios', type=float, nargs='+', help='Injection-magnitude ratios')

    # Gen-scenario command
    gen_parser = subparsers.add_parser('gen-scenario', help='Write a generated scenario as trace files')
    gen_parser.add_argument('--horizon', type=int)
    gen_parser.add_argument('--index', type=int, default=0)
    gen_parser.add_argument('--purpose', choices=['scenario', 'test'], default='scenario')

    # Status command
    subparsers.add_parser('status', help='Show run registry status')
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    level = logging.WARNING if args.verbose == 0 else (logging.INFO if args.verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')

    if not args.command:
        parser.print_help()
        return 1
    if args.command == 'status':
        return cmd_status(args)
    return run_command(args)
