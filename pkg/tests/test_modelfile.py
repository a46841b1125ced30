"""Tests for simrel.modelfile module."""

import copy
import json

import numpy as np
import pytest

from simrel.config import CASE_STUDY_PATH
from simrel.errors import ModelFileError
from simrel.modelfile import canonical_form, load_model, parse_model, serialize_model


SCALAR_SYSTEM = {"A": [[0.5]], "B": [[1.0]], "C": [[1.0]], "D": [[0.0]], "R": [[1.0]]}

MINIMAL = {
    "format_version": 1,
    "subsystems": [{
        "concrete": SCALAR_SYSTEM,
        "abstract": SCALAR_SYSTEM,
        "relation": {"P": [[1.0]], "M": [[1.0]], "eps": 1.0},
        "input_relation": {"Pw": [[1.0]], "Mw": [[1.0]], "eps_w": 0.0},
        "interface": {"K": [[0.0]], "Q": [[0.0]], "S": [[0.0]], "L1": [[0.0]], "L2": [[0.0]]},
        "certification": {"delta": 0.001, "c_nuhat": 0.25},
    }],
}


def document(**changes):
    """Minimal one-subsystem document with top-level or subsystem keys replaced."""
    doc = copy.deepcopy(MINIMAL)
    for key, value in changes.items():
        if key in doc or key in ("topology", "composition", "validation", "synthesis", "annotations", "name"):
            doc[key] = value
        else:
            doc["subsystems"][0][key] = value
    return doc


def parse(doc):
    return parse_model(json.dumps(doc))


class TestParseModel:
    """Tests for reading model files."""

    def test_minimal_document(self):
        """Test that defaults fill a one-subsystem document."""
        model = parse(MINIMAL)

        sub = model.subsystems[0]
        assert sub.name == "subsystem_0"
        assert sub.concrete.dims == (1, 1, 1, 1, 1)
        assert sub.concrete.is_linear
        assert sub.interface.Rtilde[0, 0] == pytest.approx(1.0)
        assert sub.certification["lambda"] == "search"
        assert sub.certification["beta"] == "partition"
        assert sub.abstraction is None
        assert model.composition_lambda is None
        assert model.topology.edges == ()

    def test_case_study(self, case_model):
        """Test the shipped four-subsystem ring."""
        assert case_model.name == "four_subsystem_ring"
        assert len(case_model.subsystems) == 4
        assert case_model.composition_lambda == 0.001
        sub = case_model.subsystems[0]
        assert sub.certification["tol_eq"] == 0.002
        assert sub.abstract.phi.tag == "sine"
        assert (sub.abstract.phi.slope_lo, sub.abstract.phi.slope_hi) == (0.0, 1.0)
        assert case_model.validation["input_mode"] == "feedback"

    def test_comparison_study(self, comparison_model):
        """Test the shipped linear ring has linear subsystems and edges."""
        assert all(s.concrete.is_linear for s in comparison_model.subsystems)
        assert comparison_model.topology.edges

    def test_malformed_json(self):
        """Test that broken JSON reports its line and column."""
        with pytest.raises(ModelFileError) as exc:
            parse_model('{"format_version": 1,\n  "subsystems": [\n}')

        assert exc.value.line == 3
        assert exc.value.column is not None
        assert "line 3" in str(exc.value)

    def test_unknown_key(self):
        """Test that an unknown key is reported with its path."""
        doc = document(relation={"P": [[1.0]], "M": [[1.0]], "eps": 1.0, "Pm": 2})

        with pytest.raises(ModelFileError) as exc:
            parse(doc)

        assert exc.value.path == ["subsystems", "0", "relation", "Pm"]
        assert "subsystems.0.relation.Pm" in str(exc.value)

    def test_missing_key(self):
        """Test that a missing required key is named."""
        with pytest.raises(ModelFileError, match="missing key 'eps'"):
            parse(document(relation={"P": [[1.0]], "M": [[1.0]]}))

    def test_unsupported_format_version(self):
        """Test that other format versions are refused."""
        with pytest.raises(ModelFileError, match="format_version"):
            parse(document(format_version=2))

    def test_boolean_is_not_a_number(self):
        """Test that true is not accepted where a number is expected."""
        with pytest.raises(ModelFileError, match="expected a number"):
            parse(document(relation={"P": [[1.0]], "M": [[1.0]], "eps": True}))

    def test_ragged_matrix(self):
        """Test that rows of different length are refused."""
        system = dict(SCALAR_SYSTEM, A=[[0.5, 0.1], [0.2]])

        with pytest.raises(ModelFileError, match="rows differ"):
            parse(document(concrete=system))

    def test_dimension_mismatch(self):
        """Test that inconsistent matrices are reported at the system."""
        system = dict(SCALAR_SYSTEM, B=[[1.0], [1.0]])

        with pytest.raises(ModelFileError) as exc:
            parse(document(concrete=system))

        assert exc.value.path[:3] == ["subsystems", "0", "concrete"]

    def test_unknown_nonlinearity(self):
        """Test that tags outside the closed set are refused."""
        system = dict(SCALAR_SYSTEM, nonlinearity={"tag": "tanh"})

        with pytest.raises(ModelFileError) as exc:
            parse(document(abstract=system))

        assert exc.value.path[-1] == "tag"

    def test_edge_index_out_of_range(self):
        """Test that edges must name existing subsystems."""
        with pytest.raises(ModelFileError, match="out of range"):
            parse(document(topology={"edges": [{"source": 0, "target": 3, "C": [[1.0]]}]}))

    def test_unknown_input_mode(self):
        """Test that validation input modes form a closed set."""
        with pytest.raises(ModelFileError, match="input mode"):
            parse(document(validation={"input_mode": "greedy"}))

    def test_explicit_rtilde(self):
        """Test that a given Rtilde replaces the least-squares one."""
        interface = dict(MINIMAL["subsystems"][0]["interface"], Rtilde=[[2.0]])

        model = parse(document(interface=interface))

        assert model.subsystems[0].interface.Rtilde[0, 0] == 2.0

    def test_missing_file(self, tmp_path):
        """Test that an unreadable path is a ModelFileError."""
        with pytest.raises(ModelFileError, match="cannot read"):
            load_model(tmp_path / "absent.json")


class TestCanonicalForm:
    """Tests for the canonical serialization."""

    def test_idempotent(self):
        """Test that the canonical form of a canonical form is unchanged."""
        once = canonical_form(json.dumps(MINIMAL))

        assert canonical_form(once) == once

    def test_defaults_written_out(self):
        """Test that filled defaults appear in the canonical form."""
        doc = json.loads(canonical_form(json.dumps(MINIMAL)))

        assert doc["composition"] == {"lambda": "search"}
        assert doc["subsystems"][0]["interface"]["Rtilde"] == "least_squares"
        assert doc["subsystems"][0]["concrete"]["nonlinearity"]["tag"] == "zero"

    def test_shipped_model_round_trips(self):
        """Test that reparsing the serialized case study gives the same systems."""
        model = load_model(CASE_STUDY_PATH)
        again = parse_model(serialize_model(model))

        for a, b in zip(model.subsystems, again.subsystems):
            assert np.array_equal(a.concrete.A, b.concrete.A)
            assert np.array_equal(a.relation.P, b.relation.P)
        assert serialize_model(again) == serialize_model(model)
