"""Tests for simrel.cli module."""

import json
from unittest.mock import patch

import pytest

from simrel.artifacts import CERTIFICATES_FILE, COMPOSED_FILE, REPORT_FILE, SYNTHESIS_FILE
from simrel.cli import _exact_abstract_event, main
from simrel.config import CASE_STUDY_PATH
from simrel.errors import EXIT_CERTIFICATION, EXIT_OK, EXIT_ORDERING, EXIT_PARSE, EXIT_RESOURCES
from simrel.reports import strip_timing


def run(command, model, run_dir, *extra):
    return main([command, str(model), "--out-dir", str(run_dir), *extra])


@pytest.fixture
def perturbed_model(tmp_path):
    """Case study with Q[0, 0] of the first subsystem moved by 1."""
    doc = json.loads(CASE_STUDY_PATH.read_text())
    doc["subsystems"][0]["interface"]["Q"][0][0] += 1.0
    path = tmp_path / "perturbed.json"
    path.write_text(json.dumps(doc))
    return path


class TestCertify:
    """Tests for the certify subcommand."""

    def test_case_study(self, run_dir, events_log):
        """Test that the shipped ring certifies and writes certificates."""
        assert run("certify", CASE_STUDY_PATH, run_dir) == EXIT_OK

        doc = json.loads((run_dir / CERTIFICATES_FILE).read_text())
        assert len(doc["certificates"]) == 4
        assert "certified eps=1.25" in events_log.read_text()

    def test_failure_names_condition(self, run_dir, perturbed_model, capsys):
        """Test that a perturbed interface fails with the drift condition named."""
        (run_dir / CERTIFICATES_FILE).write_text("{}")

        assert run("certify", perturbed_model, run_dir) == EXIT_CERTIFICATION

        out = capsys.readouterr().out
        assert "certification FAILED" in out
        assert "drift: residual" in out
        assert not (run_dir / CERTIFICATES_FILE).exists()

    def test_malformed_model(self, run_dir, tmp_path):
        """Test that broken JSON exits with the parse code."""
        path = tmp_path / "broken.json"
        path.write_text('{"format_version": 1,')

        assert run("certify", path, run_dir) == EXIT_PARSE

    def test_rejects_bad_lambda(self, run_dir):
        """Test that --lambda accepts only numbers and 'search'."""
        with pytest.raises(SystemExit):
            run("certify", CASE_STUDY_PATH, run_dir, "--lambda", "often")


class TestStageOrdering:
    """Tests for stages run before their prerequisites."""

    def test_compose_before_certify(self, run_dir):
        """Test that compose without certificates exits with the ordering code."""
        assert run("compose", CASE_STUDY_PATH, run_dir) == EXIT_ORDERING

    def test_synthesize_before_abstract(self, run_dir):
        """Test that synthesis needs the finite MDP."""
        assert run("certify", CASE_STUDY_PATH, run_dir) == EXIT_OK
        assert run("compose", CASE_STUDY_PATH, run_dir) == EXIT_OK

        assert run("synthesize", CASE_STUDY_PATH, run_dir) == EXIT_ORDERING

    def test_compose_writes_composed_relation(self, run_dir):
        """Test (5, 1 - 0.999^4) for the ring."""
        run("certify", CASE_STUDY_PATH, run_dir)

        assert run("compose", CASE_STUDY_PATH, run_dir) == EXIT_OK

        doc = json.loads((run_dir / COMPOSED_FILE).read_text())
        assert doc["eps"] == pytest.approx(5.0)
        assert doc["delta"] == pytest.approx(1.0 - 0.999 ** 4)


class TestAbstract:
    """Tests for the abstract subcommand."""

    def test_writes_mdps(self, run_dir):
        """Test one MDP file per subsystem with abstraction settings."""
        assert run("abstract", CASE_STUDY_PATH, run_dir) == EXIT_OK

        assert sorted(p.name for p in run_dir.glob("mdp_*.txt")) == [f"mdp_{i}.txt" for i in range(4)]

    def test_memory_cap(self, run_dir):
        """Test that a tiny memory cap exits with the resource code."""
        with patch("simrel.cli.MEMORY_CAP_MB", 1e-3):
            assert run("abstract", CASE_STUDY_PATH, run_dir) == EXIT_RESOURCES

    def test_rejects_zero_threads(self, run_dir):
        """Test that --threads must be positive."""
        with pytest.raises(SystemExit):
            run("abstract", CASE_STUDY_PATH, run_dir, "--threads", "0")


class TestExactAbstractEvent:
    """Tests for choosing exact abstract event probabilities in validation."""

    def test_coupled_ring_is_sampled(self, case_model, run_dir):
        """Test that a coupled network falls back to sampling."""
        assert run("abstract", CASE_STUDY_PATH, run_dir) == EXIT_OK

        assert _exact_abstract_event(case_model, run_dir, 10) is None

    def test_missing_mdps_are_sampled(self, case_model, run_dir):
        """Test that no MDP artifacts means no exact path."""
        assert _exact_abstract_event(case_model, run_dir, 10) is None


class TestRun:
    """Tests for the full pipeline."""

    def test_case_study_pipeline(self, run_dir):
        """Test that the ring runs end to end with a composed eps of 5."""
        assert run("run", CASE_STUDY_PATH, run_dir, "--trials", "2000") == EXIT_OK

        report = (run_dir / REPORT_FILE).read_text()
        assert "eps_composed | 5 | 5 | - | INFO" in report
        assert "== synthesis ==" in report
        assert "overall: PASS" in report
        assert (run_dir / SYNTHESIS_FILE).exists()

        synthesis = json.loads((run_dir / SYNTHESIS_FILE).read_text())
        bounds = synthesis["event_bounds"]
        assert synthesis["closeness_source"] == "composed"
        assert bounds["method"] == "exact"
        # eps = 5 swallows the +-0.03 box, so the contracted event is empty
        assert bounds["abstract_contracted"] == 0.0
        assert 0.0 == bounds["lower"] <= bounds["upper"] <= 1.0
        assert "concrete_event_bounds" in report
        # The ring is coupled, so its abstract network is not a product of the stored MDPs
        assert "abstract_event_contracted | - | " in report
        assert [line for line in report.splitlines() if line.startswith("abstract_event_contracted")][0] \
            .endswith("| sampled | INFO")

    def test_report_independent_of_threads(self, tmp_path):
        """Test that reports from 1 and 4 threads match apart from timings."""
        one, four = tmp_path / "one", tmp_path / "four"

        assert run("run", CASE_STUDY_PATH, one, "--trials", "600", "--threads", "1") == EXIT_OK
        assert run("run", CASE_STUDY_PATH, four, "--trials", "600", "--threads", "4") == EXIT_OK

        assert strip_timing((one / REPORT_FILE).read_text()) == strip_timing((four / REPORT_FILE).read_text())
