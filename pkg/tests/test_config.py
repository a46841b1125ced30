"""Tests for simrel.config module."""

import importlib


class TestConfig:
    """Tests for configuration settings."""

    def test_root_dir_exists(self):
        """Test that ROOT_DIR points to valid directory."""
        from simrel.config import ROOT_DIR

        assert ROOT_DIR.exists()
        assert ROOT_DIR.is_dir()

    def test_data_and_logs_dirs_exist(self):
        """Test that DATA_DIR and LOGS_DIR are created."""
        from simrel.config import DATA_DIR, LOGS_DIR

        assert DATA_DIR.is_dir()
        assert LOGS_DIR.is_dir()

    def test_shipped_models_in_data_dir(self):
        """Test that both case-study models are shipped."""
        from simrel.config import CASE_STUDY_PATH, COMPARISON_STUDY_PATH, DATA_DIR

        assert CASE_STUDY_PATH.parent == DATA_DIR
        assert CASE_STUDY_PATH.exists()
        assert COMPARISON_STUDY_PATH.exists()

    def test_events_log_in_logs_dir(self):
        """Test that the events log lives in LOGS_DIR."""
        from simrel.config import EVENTS_LOG_PATH, LOGS_DIR

        assert EVENTS_LOG_PATH.parent == LOGS_DIR

    def test_tolerances(self):
        """Test default numerical tolerances."""
        from simrel.config import TOL_EQ, TOL_PSD_REL

        assert TOL_PSD_REL == 1e-8
        assert TOL_EQ == 1e-6

    def test_validation_settings(self):
        """Test Monte Carlo defaults."""
        from simrel.config import DEFAULT_HORIZON, DEFAULT_SEED, DEFAULT_TRIALS, MIN_TRIALS

        assert DEFAULT_SEED == 7
        assert DEFAULT_TRIALS == 10000
        assert DEFAULT_HORIZON == 10
        assert MIN_TRIALS <= DEFAULT_TRIALS

    def test_environment_override(self, monkeypatch, tmp_path):
        """Test that SIMREL_* variables override defaults."""
        import simrel.config

        monkeypatch.setenv("SIMREL_SEED", "42")
        monkeypatch.setenv("SIMREL_RUNS_DIR", str(tmp_path))
        try:
            config = importlib.reload(simrel.config)
            assert config.DEFAULT_SEED == 42
            assert config.RUNS_DIR == tmp_path
        finally:
            monkeypatch.undo()
            importlib.reload(simrel.config)
