"""Artifact store for pipeline stages (certificates, composed relations, reports)."""

import json
from pathlib import Path
from typing import Any, Dict, List

import numpy as np

from .certification import ChanceConstraintParams, ConditionCheck, RelationCertificate
from .config import FORMAT_VERSION
from .errors import MissingArtifactError
from .network import ComposedRelation, CompositionalityCheck
from .relations import InterfaceParams, QuadraticInputRelation, QuadraticStateRelation

CERTIFICATES_FILE = "certificates.json"
COMPOSED_FILE = "composed.json"
SYNTHESIS_FILE = "synthesis.json"
VALIDATION_FILE = "validation_report.txt"
REPORT_FILE = "report.txt"


def mdp_file(i: int) -> str:
    return f"mdp_{i}.txt"


def policy_file(i: int) -> str:
    return f"policy_{i}.txt"


def _rows(matrix: np.ndarray) -> List[List[float]]:
    return np.asarray(matrix, dtype=float).tolist()


def save_artifact(out_dir: Path, name: str, payload: Dict[str, Any]) -> Path:
    """Save a JSON artifact, stamped with the format version."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    document = {"format_version": FORMAT_VERSION, **payload}
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_artifact(out_dir: Path, name: str, stage: str) -> Dict[str, Any]:
    """Load a JSON artifact produced by an earlier stage.

    Args:
        out_dir: Run directory.
        name: Artifact file name.
        stage: Subcommand producing it, named in the error.

    Raises:
        MissingArtifactError: when the artifact is absent or unreadable.
    """
    path = Path(out_dir) / name
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run '{stage}' first")
    try:
        with open(path, "r") as f:
            document = json.load(f)
    except (json.JSONDecodeError, IOError) as e:
        raise MissingArtifactError(f"{path} is unreadable ({e}); rerun '{stage}'") from e
    if document.get("format_version") != FORMAT_VERSION:
        raise MissingArtifactError(f"{path} has format_version {document.get('format_version')!r}; rerun '{stage}'")
    return document


def require_file(out_dir: Path, name: str, stage: str) -> Path:
    path = Path(out_dir) / name
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run '{stage}' first")
    return path


def certificate_to_dict(cert: RelationCertificate) -> Dict[str, Any]:
    rel, irel, ifc = cert.state_relation, cert.input_relation, cert.interface
    return {
        "name": cert.name,
        "eps": cert.eps,
        "delta": cert.delta,
        "lambda": cert.lam,
        "path": cert.path,
        "chance": cert.chance.to_dict(),
        "evidence": [check.to_dict() for check in cert.evidence],
        "flags": list(cert.flags),
        "channel_weights": cert.channel_weights,
        "tolerances": dict(cert.tolerances),
        "relation": {"P": _rows(rel.P), "M": _rows(rel.M), "eps": rel.eps},
        "input_relation": {"Pw": _rows(irel.Pw), "Pw_shape": list(irel.Pw.shape), "Mw": _rows(irel.Mw),
                           "eps_w": irel.eps_w},
        "interface": {**{key: _rows(getattr(ifc, key)) for key in ("K", "Q", "S", "L1", "L2", "Rtilde")},
                      "S_shape": list(ifc.S.shape)},
    }


def certificate_from_dict(data: Dict[str, Any]) -> RelationCertificate:
    rel = data["relation"]
    irel = data["input_relation"]
    ifc = data["interface"]
    Pw = np.array(irel["Pw"], dtype=float).reshape(irel["Pw_shape"])
    S = np.array(ifc["S"], dtype=float).reshape(ifc["S_shape"])
    return RelationCertificate(
        state_relation=QuadraticStateRelation(rel["P"], rel["M"], rel["eps"]),
        input_relation=QuadraticInputRelation.from_eps(Pw, irel["Mw"], irel["eps_w"]),
        interface=InterfaceParams(ifc["K"], ifc["Q"], S, ifc["L1"], ifc["L2"], ifc["Rtilde"]),
        delta=data["delta"],
        lam=data["lambda"],
        path=data["path"],
        chance=ChanceConstraintParams(**data["chance"]),
        evidence=[ConditionCheck(**check) for check in data["evidence"]],
        flags=list(data["flags"]),
        channel_weights=data["channel_weights"],
        tolerances=dict(data["tolerances"]),
        name=data["name"],
    )


def save_certificates(out_dir: Path, certs: List[RelationCertificate]) -> Path:
    return save_artifact(out_dir, CERTIFICATES_FILE, {"certificates": [certificate_to_dict(c) for c in certs]})


def load_certificates(out_dir: Path) -> List[RelationCertificate]:
    document = load_artifact(out_dir, CERTIFICATES_FILE, "certify")
    return [certificate_from_dict(c) for c in document["certificates"]]


def composed_to_dict(composed: ComposedRelation, closeness: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "eps": composed.eps,
        "delta": composed.delta,
        "subsystems": [c.name for c in composed.certificates],
        "compositionality": {str(j): check.to_dict() for j, check in sorted(composed.evidence.items())},
        "closeness": closeness,
    }


def composed_from_dict(data: Dict[str, Any], certs: List[RelationCertificate]) -> ComposedRelation:
    evidence = {int(j): CompositionalityCheck(c["passed"], c["lambda"], c["min_eig"], c["searched"])
                for j, c in data["compositionality"].items()}
    return ComposedRelation(list(certs), data["eps"], data["delta"], evidence)


def save_text(out_dir: Path, name: str, text: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w") as f:
        f.write(text)
    return path
