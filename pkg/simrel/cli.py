"""Command-line front end: certify, compose, abstract, synthesize, simulate, report.

Every stage reads the model file and writes its artifacts into the run
directory (``--out-dir``); later stages read what earlier ones wrote.
Exit codes: 0 ok, 1 certification failure, 2 model file error, 3 missing
prerequisite artifact, 4 resource cap exceeded.
"""

import argparse
import math
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .abstraction import build_finite_mdp, product_tube_probability, read_mdp, tube_probability, write_mdp
from .artifacts import (
    CERTIFICATES_FILE,
    COMPOSED_FILE,
    REPORT_FILE,
    SYNTHESIS_FILE,
    VALIDATION_FILE,
    composed_from_dict,
    composed_to_dict,
    load_artifact,
    load_certificates,
    mdp_file,
    policy_file,
    require_file,
    save_artifact,
    save_certificates,
    save_text,
)
from .certification import certify_relation
from .config import (
    DEFAULT_HORIZON,
    DEFAULT_SEED,
    DEFAULT_THREADS,
    DEFAULT_TRIALS,
    MEMORY_CAP_MB,
    RUNS_DIR,
    TOL_EQ,
)
from .errors import EXIT_CERTIFICATION, EXIT_OK, EXIT_PARSE, CertificationError, ModelFileError, SimrelError
from .guarantees import (
    EXACT,
    FAIL,
    INFO,
    PASS,
    ClosenessCertificate,
    EventTube,
    MetricRecord,
    bound_event_probability,
    contract_tube,
    expand_tube,
    monte_carlo_validate,
)
from .modelfile import SEARCH, NetworkModel, load_model
from .network import (
    CoupledNetwork,
    check_compositionality_condition,
    check_interconnection_constraint,
    compose_relations,
    composition_sources,
    level_policy,
)
from .reports import RunReport, certificate_records, log_event, parse_report
from .synthesis import (
    SAFETY,
    SpecHorizon,
    dp_reach,
    dp_safety,
    guarantee_transfer,
    tabulate_level_policy,
    write_policy,
)


def _lambda_arg(value: str):
    if value == SEARCH:
        return SEARCH
    try:
        lam = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or '{SEARCH}', got '{value}'")
    if lam < 0:
        raise argparse.ArgumentTypeError("multiplier must be nonnegative")
    return lam


def _out_dir(args: argparse.Namespace) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    return RUNS_DIR / Path(args.model).stem


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def _certification_settings(args: argparse.Namespace, settings: Dict) -> Dict:
    """Merge per-subsystem model settings with CLI overrides."""
    lam = args.lam if args.lam is not None else settings["lambda"]
    return {
        "lam": None if lam == SEARCH else lam,
        "dof": args.dof if args.dof is not None else settings["dof"],
        "tol_psd": args.tol_psd if args.tol_psd is not None else settings["tol_psd"],
        "tol_eq": args.tol_eq if args.tol_eq is not None else (settings["tol_eq"] or TOL_EQ),
    }


def cmd_certify(args: argparse.Namespace, model: Optional[NetworkModel] = None) -> int:
    """Certify every subsystem; certificates are written only if all pass."""
    model = model or load_model(args.model)
    out_dir = _out_dir(args)
    certs, failures = [], {}
    for i, sub in enumerate(model.subsystems):
        settings = _certification_settings(args, sub.certification)
        try:
            cert = certify_relation(sub.concrete, sub.abstract, sub.relation, sub.input_relation, sub.interface,
                                    delta=sub.certification["delta"], c_nuhat=sub.certification["c_nuhat"],
                                    beta=sub.beta(), name=sub.name, **settings)
        except CertificationError as e:
            failures[sub.name] = e
            log_event(f"{sub.name}: certification FAILED: {', '.join(e.failures)}")
            for name, residual in e.failures.items():
                print(f"  {name}: residual {residual:.6g}")
            continue
        certs.append(cert)
        log_event(f"{sub.name}: certified eps={cert.eps:g} delta={cert.delta:g} via {cert.path}")

    stale = out_dir / CERTIFICATES_FILE
    if failures:
        if stale.exists():
            stale.unlink()
        return EXIT_CERTIFICATION
    path = save_certificates(out_dir, certs)
    print(f"Wrote {len(certs)} certificates to {path}")
    return EXIT_OK


def cmd_compose(args: argparse.Namespace, model: Optional[NetworkModel] = None) -> int:
    """Check compositionality and write the composed relation with its closeness certificate."""
    model = model or load_model(args.model)
    out_dir = _out_dir(args)
    certs = load_certificates(out_dir)
    if len(certs) != len(model.subsystems):
        raise CertificationError({"certificates": float(len(certs))},
                                 f"{len(certs)} certificates for {len(model.subsystems)} subsystems; rerun 'certify'")

    topology = model.topology
    state_dims = [sub.concrete.n for sub in model.subsystems]
    abstract_dims = [sub.abstract.n for sub in model.subsystems]
    for abstract, dims in ((False, state_dims), (True, abstract_dims)):
        report = check_interconnection_constraint(topology, dims, abstract)
        if not report.passed:
            edge_id, problem = report.problems[0]
            raise ModelFileError(f"edge {edge_id}: {problem}", path=["topology", "edges"])

    evidence = {}
    receivers = sorted({edge.target for edge in topology.edges})
    for j in receivers:
        sources = composition_sources(topology, j, certs)
        check = check_compositionality_condition(sources, certs[j].input_relation, model.composition_lambda,
                                                 args.tol_psd)
        evidence[j] = check
        verdict = "passed" if check.passed else "FAILED"
        log_event(f"{model.subsystems[j].name}: compositionality {verdict} (lambda={check.lam:.6g}, "
                  f"min eigenvalue {check.min_eig:.3g})")

    composed = compose_relations(certs, topology, evidence)
    closeness = ClosenessCertificate.from_relation(composed.eps, composed.delta, args.horizon)
    path = save_artifact(out_dir, COMPOSED_FILE, composed_to_dict(composed, closeness.to_dict()))
    log_event(f"composed eps={composed.eps:.6g} delta={composed.delta:.6g} gamma({args.horizon})={closeness.gamma:.6g}")
    print(f"Wrote composed relation to {path}")
    return EXIT_OK


def cmd_abstract(args: argparse.Namespace, model: Optional[NetworkModel] = None) -> int:
    """Build and write the finite MDP of every subsystem with abstraction settings."""
    model = model or load_model(args.model)
    out_dir = _out_dir(args)
    built = 0
    for i, sub in enumerate(model.subsystems):
        if sub.abstraction is None:
            continue
        ab = sub.abstraction
        mdp = build_finite_mdp(sub.abstract, sub.partition(), sub.internal_input_levels(), ab["external_inputs"],
                               ab["x0"], seed=args.seed, memory_cap_mb=MEMORY_CAP_MB,
                               threads=args.threads)
        write_mdp(mdp, out_dir / mdp_file(i))
        built += 1
        log_event(f"{sub.name}: finite MDP with {mdp.n_states} states, {mdp.n_internal}x{mdp.n_external} inputs")
    if not built:
        raise ModelFileError("no subsystem has abstraction settings", path=["subsystems"])
    return EXIT_OK


def cmd_synthesize(args: argparse.Namespace, model: Optional[NetworkModel] = None) -> int:
    """Synthesize a policy on the abstraction and transfer its guarantee."""
    model = model or load_model(args.model)
    out_dir = _out_dir(args)
    syn = model.synthesis
    if syn is None:
        raise ModelFileError("model has no synthesis settings", path=["synthesis"])
    i = syn["subsystem"]
    sub = model.subsystems[i]
    composed_doc = load_artifact(out_dir, COMPOSED_FILE, "compose")
    mdp = read_mdp(require_file(out_dir, mdp_file(i), "abstract"))
    mdp.partition = sub.partition()

    lower, upper = np.asarray(syn["output_lower"]), np.asarray(syn["output_upper"])
    with np.errstate(invalid="ignore"):
        inside = np.all((mdp.outputs >= lower) & (mdp.outputs <= upper), axis=-1)
    states = [int(s) for s in np.nonzero(inside)[0] if s != mdp.sink_index]
    spec = SpecHorizon.constant(syn["kind"], states, args.horizon)
    solve = dp_safety if syn["kind"] == SAFETY else dp_reach
    values, policy = solve(mdp, spec, syn["internal_input"])

    v_hat = float(values[0, mdp.initial_state])
    closeness = ClosenessCertificate.from_relation(composed_doc["eps"], composed_doc["delta"], args.horizon)
    bound = guarantee_transfer(v_hat, closeness)
    event_bounds = None
    if syn["kind"] == SAFETY:
        event = EventTube.constant(lower, upper, args.horizon)
        p_contracted = tube_probability(mdp, policy, contract_tube(event, closeness.eps))
        p_expanded = tube_probability(mdp, policy, expand_tube(event, closeness.eps))
        ev_lo, ev_hi = bound_event_probability(closeness, p_contracted, p_expanded)
        event_bounds = {"method": EXACT, "abstract_contracted": p_contracted, "abstract_expanded": p_expanded,
                        "lower": ev_lo, "upper": ev_hi}
    write_policy(policy, out_dir / policy_file(i))
    save_artifact(out_dir, SYNTHESIS_FILE, {
        "subsystem": i,
        "kind": syn["kind"],
        "horizon": args.horizon,
        "abstract_value": v_hat,
        "closeness": closeness.to_dict(),
        # Closeness of the network outputs, not of this subsystem alone
        "closeness_source": "composed",
        "concrete_lower_bound": bound,
        "concrete_event": {"lower": (lower - closeness.eps).tolist(), "upper": (upper + closeness.eps).tolist()},
        "n_spec_states": len(states),
        "event_bounds": event_bounds,
    })
    log_event(f"{sub.name}: {syn['kind']} value {v_hat:.6g}, concrete bound {bound:.6g}")
    return EXIT_OK


def _coupled_network(model: NetworkModel, certs) -> CoupledNetwork:
    subs = model.subsystems
    validation = model.validation or {"input_mode": "zero", "tube": None}
    first = next((s for s in subs if s.abstraction is not None), None)
    levels = first.abstraction["external_inputs"] if first is not None else [[0.0] * subs[0].abstract.m]
    xhat0 = [np.asarray(s.abstraction["x0"]) if s.abstraction is not None else np.zeros(s.abstract.n) for s in subs]
    return CoupledNetwork(
        topology=model.topology,
        concrete=[s.concrete for s in subs],
        abstract=[s.abstract for s in subs],
        certificates=certs,
        xhat0=xhat0,
        partitions=[s.partition() for s in subs],
        policy=level_policy(levels, [s.abstract for s in subs], validation["input_mode"]),
    )


def _exact_abstract_event(model: NetworkModel, out_dir: Path, horizon: int) -> Optional[Callable[[EventTube], float]]:
    """Exact abstract tube probability, when the abstract network is the product of its stored MDPs.

    That needs uncoupled subsystems, an MDP file for each, and a validation
    input policy that can be tabulated over the MDP inputs.
    """
    subs = model.subsystems
    if model.topology.edges or any(s.abstraction is None for s in subs):
        return None
    if not all((out_dir / mdp_file(i)).exists() for i in range(len(subs))):
        return None
    mode = (model.validation or {"input_mode": "zero"})["input_mode"]
    levels = subs[0].abstraction["external_inputs"]
    factors, slices, start = [], [], 0
    for i, sub in enumerate(subs):
        mdp = read_mdp(out_dir / mdp_file(i))
        policy = tabulate_level_policy(mdp, sub.abstract, levels, mode, horizon)
        if policy is None:
            return None
        factors.append((mdp, policy))
        slices.append(list(range(start, start + sub.abstract.q)))
        start += sub.abstract.q
    return lambda tube: product_tube_probability(factors, tube, slices)


def cmd_simulate(args: argparse.Namespace, model: Optional[NetworkModel] = None) -> int:
    """Monte Carlo validation of the composed guarantee with coupled simulations."""
    model = model or load_model(args.model)
    out_dir = _out_dir(args)
    certs = load_certificates(out_dir)
    composed = composed_from_dict(load_artifact(out_dir, COMPOSED_FILE, "compose"), certs)
    pair = _coupled_network(model, certs)

    tube = None
    validation = model.validation
    if validation is not None and validation["tube"] is not None:
        tube = EventTube.constant(validation["tube"]["lower"], validation["tube"]["upper"], args.horizon)
    abstract_event = _exact_abstract_event(model, out_dir, args.horizon) if tube is not None else None

    report = RunReport(f"{model.name} validation", seed=args.seed)
    with report.timed("simulate"):
        result = monte_carlo_validate(pair, composed, tube, trials=args.trials, seed=args.seed,
                                      horizon=args.horizon, threads=args.threads,
                                      abstract_event=abstract_event)
    report.add("validation", result.records)
    save_text(out_dir, VALIDATION_FILE, report.render())
    for record in result.records:
        log_event(f"validation {record.name}: {record.empirical} ({record.verdict})")
    return EXIT_OK if result.passed else EXIT_CERTIFICATION


def _composition_records(composed_doc: Dict, certs) -> List[MetricRecord]:
    expected_eps = math.fsum(c.eps for c in certs)
    expected_delta = -math.expm1(math.fsum(math.log1p(-c.delta) for c in certs))
    closeness = composed_doc["closeness"]
    records = [
        MetricRecord("eps_composed", _fmt(expected_eps), _fmt(composed_doc["eps"]), "-", INFO),
        MetricRecord("delta_composed", _fmt(expected_delta), _fmt(composed_doc["delta"]), "-", INFO),
        MetricRecord(f"gamma_horizon_{closeness['horizon']}", "-", _fmt(closeness["gamma"]), "-", INFO),
    ]
    for j, check in sorted(composed_doc["compositionality"].items(), key=lambda item: int(item[0])):
        records.append(MetricRecord(f"compositionality_{j}", f"lambda {_fmt(check['lambda'])}",
                                    _fmt(check["min_eig"]), "-", PASS if check["passed"] else FAIL))
    return records


def _synthesis_records(doc: Dict) -> List[MetricRecord]:
    records = [
        MetricRecord("abstract_value", "-", _fmt(doc["abstract_value"]), "-", INFO),
        MetricRecord("concrete_lower_bound", "max(0, value - gamma)", _fmt(doc["concrete_lower_bound"]), "-", INFO),
        MetricRecord("closeness_source", "-", doc.get("closeness_source", "composed"), "-", INFO),
    ]
    bounds = doc.get("event_bounds")
    if bounds:
        records.append(MetricRecord("concrete_event_bounds", f"[{_fmt(bounds['lower'])}, {_fmt(bounds['upper'])}]",
                                    "-", bounds["method"], INFO))
    return records


def build_report(args: argparse.Namespace, model: NetworkModel, timings: Optional[Dict[str, float]] = None) -> RunReport:
    """Consolidated report over whatever artifacts the run directory holds."""
    out_dir = _out_dir(args)
    certs = load_certificates(out_dir)
    report = RunReport(model.name, seed=args.seed)
    report.add("certification", [r for cert in certs for r in certificate_records(cert)])
    if (out_dir / COMPOSED_FILE).exists():
        report.add("composition", _composition_records(load_artifact(out_dir, COMPOSED_FILE, "compose"), certs))
    if (out_dir / SYNTHESIS_FILE).exists():
        report.add("synthesis", _synthesis_records(load_artifact(out_dir, SYNTHESIS_FILE, "synthesize")))
    if (out_dir / VALIDATION_FILE).exists():
        validation = parse_report((out_dir / VALIDATION_FILE).read_text())
        for section, records in validation.sections:
            report.add(section, records)
        for stage, seconds in validation.timings.items():
            report.timings[stage] = seconds
    if model.annotations:
        report.add("annotations", [MetricRecord(str(key), "-", str(value), "-", INFO)
                                   for key, value in sorted(model.annotations.items())])
    for stage, seconds in (timings or {}).items():
        report.timings[stage] = seconds
    return report


def cmd_report(args: argparse.Namespace, model: Optional[NetworkModel] = None,
               timings: Optional[Dict[str, float]] = None) -> int:
    """Render and write the consolidated report."""
    model = model or load_model(args.model)
    report = build_report(args, model, timings)
    path = save_text(_out_dir(args), REPORT_FILE, report.render())
    print(report.summary().to_string(index=False))
    print(f"\nWrote report to {path}")
    return EXIT_OK if report.passed else EXIT_CERTIFICATION


def cmd_run(args: argparse.Namespace) -> int:
    """Full pipeline: certify, compose, then the optional stages the model configures."""
    model = load_model(args.model)
    stages = [("certify", cmd_certify), ("compose", cmd_compose)]
    if any(sub.abstraction is not None for sub in model.subsystems):
        stages.append(("abstract", cmd_abstract))
        if model.synthesis is not None:
            stages.append(("synthesize", cmd_synthesize))
    stages.append(("simulate", cmd_simulate))

    timings = {}
    worst = EXIT_OK
    for name, fn in stages:
        start = time.perf_counter()
        code = fn(args, model)
        timings[name] = time.perf_counter() - start
        if code != EXIT_OK:
            if name != "simulate":
                return code
            worst = code
    code = cmd_report(args, model, timings)
    return worst or code


COMMANDS = {
    "certify": cmd_certify,
    "compose": cmd_compose,
    "abstract": cmd_abstract,
    "synthesize": cmd_synthesize,
    "simulate": cmd_simulate,
    "report": cmd_report,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("model", help="Network model file (JSON)")
    common.add_argument("--out-dir", default=None, help="Run directory (default: data/runs/<model name>)")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"Random seed (default: {DEFAULT_SEED})")
    common.add_argument("--trials", type=int, default=DEFAULT_TRIALS,
                        help=f"Monte Carlo trials (default: {DEFAULT_TRIALS})")
    common.add_argument("--horizon", type=int, default=DEFAULT_HORIZON,
                        help=f"Time horizon T (default: {DEFAULT_HORIZON})")
    common.add_argument("--tol-psd", type=float, default=None, help="Relative eigenvalue tolerance")
    common.add_argument("--tol-eq", type=float, default=None, help="Relative tolerance of structural equalities")
    common.add_argument("--lambda", dest="lam", type=_lambda_arg, default=None,
                        help="S-procedure multiplier for certification, or 'search'")
    common.add_argument("--dof", type=int, default=None, help="Chi-square degrees of freedom")
    common.add_argument("--threads", type=int, default=DEFAULT_THREADS,
                        help=f"Worker threads (default: {DEFAULT_THREADS})")

    parser = argparse.ArgumentParser(description="Compositional finite abstractions with (eps, delta) simulation relations")
    parser.add_argument("--version", action="version", version=f"simrel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or "").splitlines()[0])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be positive")
    if args.horizon < 0:
        parser.error("--horizon must be nonnegative")
    try:
        return COMMANDS[args.command](args)
    except SimrelError as e:
        log_event(f"{args.command}: {type(e).__name__}: {e}")
        return e.exit_code
    except ValueError as e:
        log_event(f"{args.command}: invalid input: {e}")
        return EXIT_PARSE
