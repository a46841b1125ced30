"""Network model files: JSON documents holding systems, relations and settings.

Layout (matrices are arrays of arrays of numbers, row-major)::

    {
      "format_version": 1,
      "name": "...",
      "subsystems": [{
          "name": "...",
          "concrete": {"A", "B", "C", "D", "E", "F", "R", "nonlinearity"},
          "abstract": {... same keys ...},
          "relation": {"P", "M", "eps"},
          "input_relation": {"Pw", "Mw", "eps_w"},
          "interface": {"K", "Q", "S", "L1", "L2", "Rtilde"},
          "certification": {"delta", "c_nuhat", "beta", "dof", "lambda", "tol_eq", "tol_psd"},
          "abstraction": {"lower", "upper", "widths", "internal_inputs", "external_inputs", "x0"}
      }],
      "topology": {"edges": [{"source", "target", "C", "C_hat", "slot", "slot_hat"}]},
      "composition": {"lambda"},
      "validation": {"input_mode", "tube"},
      "synthesis": {"subsystem", "kind", "output_lower", "output_upper", "internal_input"},
      "annotations": {...free-form...}
    }

Unknown keys are rejected with their location; defaults are filled in so
that serializing a parsed file yields its canonical form.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .abstraction import GridPartition, build_partition
from .certification import least_squares_rtilde
from .config import FORMAT_VERSION
from .errors import ModelFileError
from .models import NONLINEARITY_TAGS, NonlinearSystemTuple, NonlinearityDescriptor
from .network import Edge, NetworkTopology
from .relations import InterfaceParams, QuadraticInputRelation, QuadraticStateRelation

REQUIRED = object()

SEARCH = "search"
LEAST_SQUARES = "least_squares"
INPUT_MODES = ("zero", "random", "feedback")


def _check_keys(obj: Any, path: List[str], keys: Dict[str, Any]) -> Dict[str, Any]:
    """Validate an object against allowed keys, filling defaults."""
    if not isinstance(obj, dict):
        raise ModelFileError("expected an object", path=path)
    for key in obj:
        if key not in keys:
            raise ModelFileError(f"unknown key '{key}'", path=path + [key])
    out = {}
    for key, default in keys.items():
        if key in obj:
            out[key] = obj[key]
        elif default is REQUIRED:
            raise ModelFileError(f"missing key '{key}'", path=path + [key])
        else:
            out[key] = default
    return out


def _number(value: Any, path: List[str], allow: tuple = ()) -> Union[float, str, None]:
    if value in allow:
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ModelFileError("expected a number", path=path)
    return float(value)


def _integer(value: Any, path: List[str], allow: tuple = ()) -> Union[int, str, None]:
    if value in allow:
        return value
    if isinstance(value, bool) or not isinstance(value, int):
        raise ModelFileError("expected an integer", path=path)
    return value


def _matrix(value: Any, path: List[str]) -> List[List[float]]:
    if not isinstance(value, list) or not all(isinstance(row, list) for row in value):
        raise ModelFileError("expected a matrix (array of arrays of numbers)", path=path)
    widths = {len(row) for row in value}
    if len(widths) > 1:
        raise ModelFileError("matrix rows differ in length", path=path)
    return [[_number(v, path + [f"{i}"]) for v in row] for i, row in enumerate(value)]


def _vector(value: Any, path: List[str]) -> List[float]:
    if not isinstance(value, list):
        raise ModelFileError("expected an array of numbers", path=path)
    return [_number(v, path + [f"{i}"]) for i, v in enumerate(value)]


def _normalize_nonlinearity(obj: Any, path: List[str]) -> Dict:
    doc = _check_keys(obj, path, {"tag": "zero", "slope_lo": None, "slope_hi": None, "scale": 1.0,
                                  "breakpoints": [], "values": []})
    if doc["tag"] not in NONLINEARITY_TAGS:
        raise ModelFileError(f"unknown nonlinearity tag '{doc['tag']}'", path=path + ["tag"])
    for key in ("slope_lo", "slope_hi"):
        if doc[key] is not None:
            doc[key] = _number(doc[key], path + [key], allow=("inf", "-inf"))
    doc["scale"] = _number(doc["scale"], path + ["scale"])
    doc["breakpoints"] = _vector(doc["breakpoints"], path + ["breakpoints"])
    doc["values"] = _vector(doc["values"], path + ["values"])
    return doc


def _normalize_system(obj: Any, path: List[str]) -> Dict:
    doc = _check_keys(obj, path, {"A": REQUIRED, "B": REQUIRED, "C": REQUIRED, "D": None, "E": None,
                                  "F": None, "R": REQUIRED, "nonlinearity": {}})
    for key in ("A", "B", "C", "R"):
        doc[key] = _matrix(doc[key], path + [key])
    n = len(doc["A"])
    defaults = {"D": [[] for _ in range(n)], "E": [[0.0] for _ in range(n)], "F": [[0.0] * n]}
    for key, default in defaults.items():
        doc[key] = default if doc[key] is None else _matrix(doc[key], path + [key])
    doc["nonlinearity"] = _normalize_nonlinearity(doc["nonlinearity"], path + ["nonlinearity"])
    return doc


def _normalize_subsystem(obj: Any, path: List[str]) -> Dict:
    doc = _check_keys(obj, path, {"name": "", "concrete": REQUIRED, "abstract": REQUIRED, "relation": REQUIRED,
                                  "input_relation": None, "interface": REQUIRED, "certification": REQUIRED,
                                  "abstraction": None})
    doc["concrete"] = _normalize_system(doc["concrete"], path + ["concrete"])
    doc["abstract"] = _normalize_system(doc["abstract"], path + ["abstract"])

    rel = _check_keys(doc["relation"], path + ["relation"], {"P": REQUIRED, "M": REQUIRED, "eps": REQUIRED})
    doc["relation"] = {"P": _matrix(rel["P"], path + ["relation", "P"]),
                       "M": _matrix(rel["M"], path + ["relation", "M"]),
                       "eps": _number(rel["eps"], path + ["relation", "eps"])}

    if doc["input_relation"] is None:
        p = len(doc["concrete"]["D"][0]) if doc["concrete"]["D"] else 0
        p_hat = len(doc["abstract"]["D"][0]) if doc["abstract"]["D"] else 0
        doc["input_relation"] = {"Pw": [[0.0] * p_hat for _ in range(p)],
                                 "Mw": [[float(i == j) for j in range(p)] for i in range(p)], "eps_w": 0.0}
    else:
        irel = _check_keys(doc["input_relation"], path + ["input_relation"],
                           {"Pw": REQUIRED, "Mw": REQUIRED, "eps_w": REQUIRED})
        doc["input_relation"] = {"Pw": _matrix(irel["Pw"], path + ["input_relation", "Pw"]),
                                 "Mw": _matrix(irel["Mw"], path + ["input_relation", "Mw"]),
                                 "eps_w": _number(irel["eps_w"], path + ["input_relation", "eps_w"])}

    ifc = _check_keys(doc["interface"], path + ["interface"],
                      {"K": REQUIRED, "Q": REQUIRED, "S": REQUIRED, "L1": REQUIRED, "L2": REQUIRED,
                       "Rtilde": LEAST_SQUARES})
    for key in ("K", "Q", "S", "L1", "L2"):
        ifc[key] = _matrix(ifc[key], path + ["interface", key])
    if ifc["Rtilde"] != LEAST_SQUARES:
        ifc["Rtilde"] = _matrix(ifc["Rtilde"], path + ["interface", "Rtilde"])
    doc["interface"] = ifc

    cert = _check_keys(doc["certification"], path + ["certification"],
                       {"delta": REQUIRED, "c_nuhat": REQUIRED, "beta": "partition", "dof": None,
                        "lambda": SEARCH, "tol_eq": None, "tol_psd": None})
    cp = path + ["certification"]
    cert["delta"] = _number(cert["delta"], cp + ["delta"])
    cert["c_nuhat"] = _number(cert["c_nuhat"], cp + ["c_nuhat"])
    cert["beta"] = _number(cert["beta"], cp + ["beta"], allow=("partition",))
    cert["dof"] = _integer(cert["dof"], cp + ["dof"], allow=(None,))
    cert["lambda"] = _number(cert["lambda"], cp + ["lambda"], allow=(SEARCH,))
    cert["tol_eq"] = _number(cert["tol_eq"], cp + ["tol_eq"], allow=(None,))
    cert["tol_psd"] = _number(cert["tol_psd"], cp + ["tol_psd"], allow=(None,))
    doc["certification"] = cert

    if doc["abstraction"] is not None:
        ap = path + ["abstraction"]
        ab = _check_keys(doc["abstraction"], ap, {"lower": REQUIRED, "upper": REQUIRED, "widths": REQUIRED,
                                                  "internal_inputs": [], "external_inputs": REQUIRED,
                                                  "x0": REQUIRED})
        for key in ("lower", "upper", "widths", "x0"):
            ab[key] = _vector(ab[key], ap + [key])
        ab["external_inputs"] = _matrix(ab["external_inputs"], ap + ["external_inputs"])
        if isinstance(ab["internal_inputs"], dict):
            grid = _check_keys(ab["internal_inputs"], ap + ["internal_inputs"],
                               {"lower": REQUIRED, "upper": REQUIRED, "widths": REQUIRED})
            ab["internal_inputs"] = {k: _vector(v, ap + ["internal_inputs", k]) for k, v in grid.items()}
        else:
            ab["internal_inputs"] = _matrix(ab["internal_inputs"], ap + ["internal_inputs"])
        doc["abstraction"] = ab
    return doc


def _normalize_document(obj: Any) -> Dict:
    doc = _check_keys(obj, [], {"format_version": REQUIRED, "name": "", "subsystems": REQUIRED,
                                "topology": {"edges": []}, "composition": {"lambda": SEARCH},
                                "validation": None, "synthesis": None, "annotations": {}})
    if doc["format_version"] != FORMAT_VERSION:
        raise ModelFileError(f"unsupported format_version {doc['format_version']!r}", path=["format_version"])
    if not isinstance(doc["subsystems"], list) or not doc["subsystems"]:
        raise ModelFileError("expected a nonempty array of subsystems", path=["subsystems"])
    doc["subsystems"] = [_normalize_subsystem(s, ["subsystems", f"{i}"]) for i, s in enumerate(doc["subsystems"])]
    n_sub = len(doc["subsystems"])

    topo = _check_keys(doc["topology"], ["topology"], {"edges": []})
    edges = []
    for i, e in enumerate(topo["edges"]):
        ep = ["topology", "edges", f"{i}"]
        edge = _check_keys(e, ep, {"source": REQUIRED, "target": REQUIRED, "C": REQUIRED, "C_hat": None,
                                   "slot": None, "slot_hat": None})
        for key in ("source", "target"):
            edge[key] = _integer(edge[key], ep + [key])
            if not 0 <= edge[key] < n_sub:
                raise ModelFileError(f"subsystem index {edge[key]} out of range", path=ep + [key])
        edge["C"] = _matrix(edge["C"], ep + ["C"])
        if edge["C_hat"] is not None:
            edge["C_hat"] = _matrix(edge["C_hat"], ep + ["C_hat"])
        for key in ("slot", "slot_hat"):
            edge[key] = _integer(edge[key], ep + [key], allow=(None,))
        edges.append(edge)
    doc["topology"] = {"edges": edges}

    comp = _check_keys(doc["composition"], ["composition"], {"lambda": SEARCH})
    doc["composition"] = {"lambda": _number(comp["lambda"], ["composition", "lambda"], allow=(SEARCH,))}

    if doc["validation"] is not None:
        val = _check_keys(doc["validation"], ["validation"], {"input_mode": "zero", "tube": None})
        if val["input_mode"] not in INPUT_MODES:
            raise ModelFileError(f"unknown input mode '{val['input_mode']}'", path=["validation", "input_mode"])
        if val["tube"] is not None:
            tube = _check_keys(val["tube"], ["validation", "tube"], {"lower": REQUIRED, "upper": REQUIRED})
            val["tube"] = {k: _vector(v, ["validation", "tube", k]) for k, v in tube.items()}
        doc["validation"] = val

    if doc["synthesis"] is not None:
        sp = ["synthesis"]
        syn = _check_keys(doc["synthesis"], sp, {"subsystem": 0, "kind": "safety", "output_lower": REQUIRED,
                                                 "output_upper": REQUIRED, "internal_input": "worst"})
        syn["subsystem"] = _integer(syn["subsystem"], sp + ["subsystem"])
        if not 0 <= syn["subsystem"] < n_sub:
            raise ModelFileError(f"subsystem index {syn['subsystem']} out of range", path=sp + ["subsystem"])
        if syn["kind"] not in ("safety", "reachability"):
            raise ModelFileError(f"unknown specification kind '{syn['kind']}'", path=sp + ["kind"])
        syn["output_lower"] = _vector(syn["output_lower"], sp + ["output_lower"])
        syn["output_upper"] = _vector(syn["output_upper"], sp + ["output_upper"])
        syn["internal_input"] = _integer(syn["internal_input"], sp + ["internal_input"], allow=(None, "worst"))
        doc["synthesis"] = syn

    if not isinstance(doc["annotations"], dict):
        raise ModelFileError("expected an object", path=["annotations"])
    return doc


def _system(doc: Dict, path: str) -> NonlinearSystemTuple:
    nl = doc["nonlinearity"]
    tag = nl["tag"]
    if tag == "pwl":
        phi = NonlinearityDescriptor.piecewise_linear(nl["breakpoints"], nl["values"])
    elif tag == "identity":
        phi = NonlinearityDescriptor.identity(nl["scale"])
    elif tag == "sine":
        phi = NonlinearityDescriptor.sine(nl["scale"])
    else:
        phi = NonlinearityDescriptor.zero()
    bounds = {k: float(nl[k]) for k in ("slope_lo", "slope_hi") if nl[k] is not None}
    if bounds:
        phi = NonlinearityDescriptor(phi.tag, bounds.get("slope_lo", phi.slope_lo), bounds.get("slope_hi", phi.slope_hi),
                                     phi.scale, phi.breakpoints, phi.values)
    D = np.array(doc["D"], dtype=float)
    if D.size == 0:
        D = np.zeros((len(doc["A"]), 0))
    try:
        return NonlinearSystemTuple(doc["A"], doc["B"], doc["C"], D, doc["E"], doc["F"], doc["R"], phi)
    except ValueError as e:
        raise ModelFileError(str(e), path=path.split(".")) from e


@dataclass(eq=False)
class SubsystemModel:
    """Typed view of one subsystem entry."""

    name: str
    concrete: NonlinearSystemTuple
    abstract: NonlinearSystemTuple
    relation: QuadraticStateRelation
    input_relation: QuadraticInputRelation
    interface: InterfaceParams
    certification: Dict[str, Any]
    abstraction: Optional[Dict[str, Any]] = None

    def partition(self) -> Optional[GridPartition]:
        if self.abstraction is None:
            return None
        ab = self.abstraction
        return build_partition(ab["lower"], ab["upper"], ab["widths"])

    def beta(self) -> float:
        beta = self.certification["beta"]
        if beta == "partition":
            part = self.partition()
            return part.beta if part is not None else 0.0
        return beta

    def internal_input_levels(self) -> np.ndarray:
        ab = self.abstraction
        spec = ab["internal_inputs"]
        if isinstance(spec, dict):
            return build_partition(spec["lower"], spec["upper"], spec["widths"]).centers
        if not spec:
            return np.zeros((1, self.abstract.p))
        return np.array(spec, dtype=float).reshape(-1, self.abstract.p)


@dataclass(eq=False)
class NetworkModel:
    """Parsed model file: normalized document plus typed subsystems and topology."""

    document: Dict[str, Any]
    subsystems: List[SubsystemModel] = field(default_factory=list)
    topology: Optional[NetworkTopology] = None

    @property
    def name(self) -> str:
        return self.document["name"]

    @property
    def composition_lambda(self) -> Optional[float]:
        lam = self.document["composition"]["lambda"]
        return None if lam == SEARCH else lam

    @property
    def validation(self) -> Optional[Dict[str, Any]]:
        return self.document["validation"]

    @property
    def synthesis(self) -> Optional[Dict[str, Any]]:
        return self.document["synthesis"]

    @property
    def annotations(self) -> Dict[str, Any]:
        return self.document["annotations"]


def _build(doc: Dict) -> NetworkModel:
    subsystems = []
    for i, sdoc in enumerate(doc["subsystems"]):
        base = f"subsystems.{i}"
        conc = _system(sdoc["concrete"], base + ".concrete")
        absr = _system(sdoc["abstract"], base + ".abstract")
        try:
            rel = QuadraticStateRelation(sdoc["relation"]["P"], sdoc["relation"]["M"], sdoc["relation"]["eps"])
            irel_doc = sdoc["input_relation"]
            Pw = np.array(irel_doc["Pw"], dtype=float).reshape(conc.p, absr.p)
            Mw = np.array(irel_doc["Mw"], dtype=float).reshape(conc.p, conc.p)
            irel = QuadraticInputRelation.from_eps(Pw, Mw, irel_doc["eps_w"])
            ifc_doc = sdoc["interface"]
            if ifc_doc["Rtilde"] == LEAST_SQUARES:
                Rtilde = least_squares_rtilde(conc.B, rel.M, rel.P, absr.B)
            else:
                Rtilde = ifc_doc["Rtilde"]
            S = np.array(ifc_doc["S"], dtype=float).reshape(conc.m, absr.p)
            ifc = InterfaceParams(ifc_doc["K"], ifc_doc["Q"], S, ifc_doc["L1"], ifc_doc["L2"], Rtilde)
            ifc.validate_against(conc, absr)
        except ValueError as e:
            raise ModelFileError(str(e), path=base.split(".")) from e
        subsystems.append(SubsystemModel(sdoc["name"] or f"subsystem_{i}", conc, absr, rel, irel, ifc,
                                         sdoc["certification"], sdoc["abstraction"]))

    edges = []
    for e in doc["topology"]["edges"]:
        edges.append(Edge(e["source"], e["target"], e["C"], e["C_hat"], e["slot"], e["slot_hat"]))
    topology = NetworkTopology(len(subsystems), tuple(edges),
                               tuple(s.concrete.p for s in subsystems), tuple(s.abstract.p for s in subsystems))
    return NetworkModel(doc, subsystems, topology)


def parse_model(text: str) -> NetworkModel:
    """Parse model file text.

    Raises:
        ModelFileError: with line/column for malformed JSON, with the key path otherwise.
    """
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFileError(e.msg, line=e.lineno, column=e.colno) from e
    return _build(_normalize_document(obj))


def load_model(path: Path) -> NetworkModel:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ModelFileError(f"cannot read model file {path}: {e}") from e
    return parse_model(text)


def serialize_model(model: NetworkModel) -> str:
    """Canonical text of the normalized document."""
    return json.dumps(model.document, indent=2, sort_keys=True) + "\n"


def canonical_form(text: str) -> str:
    return serialize_model(parse_model(text))
