"""Tests for simrel.reports module."""

from simrel.guarantees import MetricRecord
from simrel.reports import (
    RunReport,
    certificate_records,
    format_record,
    log_event,
    parse_report,
    strip_timing,
)


def sample_report() -> RunReport:
    report = RunReport("four_subsystem_ring", seed=7)
    report.add("compose", [MetricRecord("eps_composed", "5", "5", "-", "INFO")])
    report.add("validate", [MetricRecord("relation_retention", "0.956", "0.999", "[0.998, 1]", "PASS")])
    report.timings["certify"] = 1.25
    return report


class TestFormatRecord:
    """Tests for record lines."""

    def test_pipe_separated(self):
        """Test name | theoretical | empirical | interval | verdict."""
        record = MetricRecord("eps_composed", "5", "5", "-", "INFO")

        assert format_record(record) == "eps_composed | 5 | 5 | - | INFO"


class TestRunReport:
    """Tests for rendering and reading reports."""

    def test_render(self):
        """Test sections, the overall verdict and timing lines."""
        text = sample_report().render()

        assert text.startswith("simrel report: four_subsystem_ring\nseed: 7\n")
        assert "== compose ==\neps_composed | 5 | 5 | - | INFO\n" in text
        assert "overall: PASS" in text
        assert "# certify: 1.250 s" in text

    def test_failure_flips_overall(self):
        """Test that one failing record fails the run."""
        report = sample_report()
        report.add("certify", [MetricRecord("s1.drift", "-", "0.3", "-", "FAIL")])

        assert not report.passed
        assert "overall: FAIL" in report.render()

    def test_strip_timing(self):
        """Test that reports differing only in timings compare equal once stripped."""
        a = sample_report()
        b = sample_report()
        b.timings["certify"] = 9.5

        assert a.render() != b.render()
        assert strip_timing(a.render()) == strip_timing(b.render())

    def test_parse_back(self):
        """Test that a rendered report reads back with its records."""
        report = sample_report()

        parsed = parse_report(report.render())

        assert parsed.title == report.title
        assert parsed.seed == 7
        assert parsed.sections == report.sections
        assert parsed.timings == {"certify": 1.25}

    def test_summary_frame(self):
        """Test one row per record with its section."""
        df = sample_report().summary()

        assert list(df["section"]) == ["compose", "validate"]
        assert list(df["verdict"]) == ["INFO", "PASS"]

    def test_timed(self):
        """Test that timed stages accumulate."""
        report = RunReport("t")
        with report.timed("abstract"):
            pass
        with report.timed("abstract"):
            pass

        assert list(report.timings) == ["abstract"]
        assert report.timings["abstract"] >= 0.0


class TestCertificateRecords:
    """Tests for certificate evidence records."""

    def test_identity_certificate(self, identity_certificate):
        """Test that every condition becomes a passing record plus the path."""
        records = certificate_records(identity_certificate)

        assert all(r.name.startswith("identity.") for r in records)
        assert any(r.name == "identity.path" for r in records)
        assert all(r.verdict in ("PASS", "INFO") for r in records)


class TestLogEvent:
    """Tests for console and events-log output."""

    def test_console_and_file(self, events_log, capsys):
        """Test that events go to stdout and the events log with the same timestamp."""
        log_event("certified 4 subsystems")

        out = capsys.readouterr().out.strip()
        line = events_log.read_text().strip()
        assert out == line
        assert line.endswith("certified 4 subsystems")
        assert line.startswith("[")
