"""End-to-end tests for the favtune command line."""

import pytest
from typer.testing import CliRunner

from favtune_cli.main import app, run
from favtune_cli.midi_io import write_smf_file
from favtune_cli.remi_codec import dumps_tokens, encode
from favtune_cli.storage import RunDirectory
from tests.conftest import melody

runner = CliRunner()


def _csv_after(output: str, header: str):
    """Rows of the CSV block that starts at `header`"""
    lines = output.splitlines()
    rows = []
    for line in lines[lines.index(header) + 1:]:
        if not line.strip():
            break
        rows.append(line.split(","))
    return rows


@pytest.fixture
def scale_file(tmp_path):
    path = tmp_path / "scale.mid"
    write_smf_file(melody([60, 62, 64, 65, 67, 69, 71, 72], velocity=82), path)
    return path


@pytest.fixture
def midi_pair(tmp_path, favorite_score, input_score):
    fav, inp = tmp_path / "favorite.mid", tmp_path / "input.mid"
    write_smf_file(favorite_score, fav)
    write_smf_file(input_score, inp)
    return fav, inp


class TestAnalysisCommands:
    def test_correlate_reversed(self):
        result = runner.invoke(app, ["correlate", "--x", "1,2,3", "--y", "3,2,1"])
        assert result.exit_code == 0
        (row,) = _csv_after(result.stdout, "tau,p_value")
        assert float(row[0]) == pytest.approx(-1.0)

    def test_correlate_csv(self, tmp_path):
        path = tmp_path / "pairs.csv"
        path.write_text("ps,rating\n1,1\n2,3\n3,2\n4,4\n")
        result = runner.invoke(app, ["correlate", "--csv", str(path)])
        assert result.exit_code == 0
        (row,) = _csv_after(result.stdout, "tau,p_value")
        assert float(row[0]) == pytest.approx(4 / 6)

    def test_correlate_degenerate(self):
        result = runner.invoke(app, ["correlate", "--x", "1,1,1", "--y", "1,2,3"])
        assert result.exit_code == 4
        assert "DegenerateInput" in result.output

    def test_similarity_self(self, scale_file):
        result = runner.invoke(app, ["similarity", "--a", str(scale_file), "--b", str(scale_file), "--p", "2"])
        assert result.exit_code == 0
        (row,) = _csv_after(result.stdout, "p,ps")
        assert row[0] == "2"
        assert float(row[1]) == pytest.approx(4 / 6)

    def test_evaluate(self, midi_pair):
        fav, _ = midi_pair
        result = runner.invoke(app, ["evaluate", "--a", str(fav), "--b", str(fav)])
        assert result.exit_code == 0
        row = next(line.split(",") for line in result.stdout.splitlines() if line.startswith("D_P,"))
        assert float(row[1]) == pytest.approx(1.0)


class TestTokenCommands:
    def test_tokenize_to_stdout(self, scale_file):
        result = runner.invoke(app, ["tokenize", str(scale_file)])
        assert result.exit_code == 0
        assert dumps_tokens(encode(melody([60, 62, 64, 65, 67, 69, 71, 72]))) in result.stdout

    def test_tokenize_detokenize(self, scale_file, tmp_path):
        tokens = tmp_path / "scale.tokens"
        out = tmp_path / "back.mid"
        assert runner.invoke(app, ["tokenize", str(scale_file), "--out", str(tokens)]).exit_code == 0
        result = runner.invoke(app, ["detokenize", str(tokens), "--template", str(scale_file), "--out", str(out)])
        assert result.exit_code == 0
        assert out.read_bytes() == scale_file.read_bytes()

    def test_bad_track_index(self, scale_file):
        result = runner.invoke(app, ["tokenize", str(scale_file), "--track", "3"])
        assert result.exit_code == 2

    def test_extract_pattern(self, midi_pair):
        fav, _ = midi_pair
        result = runner.invoke(app, ["extract-pattern", "--favorite", str(fav), "--pattern-length", "4"])
        assert result.exit_code == 0
        assert "2,2,1\n" in result.stdout


class TestPipeline:
    def _pipeline(self, fav, inp, out):
        return runner.invoke(app, [
            "pipeline", "--favorite", str(fav), "--input", str(inp), "--out", str(out),
            "--model", "ngram", "--pattern-length", "4", "--seed", "1",
        ])

    def test_run_directory_and_determinism(self, midi_pair, tmp_path):
        fav, inp = midi_pair
        first = self._pipeline(fav, inp, tmp_path / "run1")
        second = self._pipeline(fav, inp, tmp_path / "run2")
        assert first.exit_code == 0, first.output
        assert second.exit_code == 0, second.output

        run1, run2 = tmp_path / "run1", tmp_path / "run2"
        for name in ("transferred.mid", "config.env", "manifest.json", "checkpoints/predictor.ckpt",
                     "patterns/smpi.txt", "reports/report.csv", "reports/ps.csv", "tokens/transferred.tokens"):
            assert (run1 / name).exists(), name
        for name in ("transferred.mid", "config.env", "checkpoints/predictor.ckpt", "tokens/transferred.tokens",
                     "reports/report.csv", "reports/ps.csv", "reports/histograms.csv", "reports/loss.csv"):
            assert (run1 / name).read_bytes() == (run2 / name).read_bytes(), name
        assert (run1 / "patterns/smpi.txt").read_text() == "2,2,1\n"

        manifest = RunDirectory(run1).load_manifest()
        manifest.verify(run1)
        cfg = manifest.pipeline_config
        assert (cfg.model, cfg.pattern_length, cfg.seed) == ("ngram", 4, 1)

    def test_transfer_command_matches_pipeline(self, midi_pair, tmp_path):
        fav, inp = midi_pair
        assert self._pipeline(fav, inp, tmp_path / "run").exit_code == 0
        run_dir = tmp_path / "run"
        out = tmp_path / "again.mid"
        result = runner.invoke(app, [
            "transfer", "--input", str(inp), "--checkpoint", str(run_dir / "checkpoints/predictor.ckpt"),
            "--smpi", str(run_dir / "patterns/smpi.txt"), "--out", str(out), "--seed", "1",
        ])
        assert result.exit_code == 0, result.output
        assert out.read_bytes() == (run_dir / "transferred.mid").read_bytes()

    def test_train_ngram(self, midi_pair, tmp_path):
        fav, _ = midi_pair
        out = tmp_path / "model.ckpt"
        result = runner.invoke(app, ["train", "--favorite", str(fav), "--out", str(out), "--model", "ngram"])
        assert result.exit_code == 0, result.output
        assert out.read_bytes().startswith(b"favtune-checkpoint version=1")


class TestRun:
    def test_success(self):
        assert run(["correlate", "--x", "1,2,3", "--y", "1,2,3"]) == 0

    def test_usage_error(self):
        assert run(["tokenize"]) == 2

    def test_missing_file(self, tmp_path):
        assert run(["tokenize", str(tmp_path / "missing.mid")]) == 3

    def test_domain_error(self, tmp_path):
        path = tmp_path / "bad.mid"
        path.write_bytes(b"not midi at all")
        assert run(["tokenize", str(path)]) == 4

    def test_zero_pattern_length(self, scale_file):
        assert run(["similarity", "--a", str(scale_file), "--b", str(scale_file), "--p", "0"]) == 2

    def test_non_numeric_csv_row(self, tmp_path):
        path = tmp_path / "pairs.csv"
        path.write_text("ps,rating\n1,1\n2,abc\n3,2\n")
        assert run(["correlate", "--csv", str(path)]) == 2

    def test_single_column_csv(self, tmp_path):
        path = tmp_path / "pairs.csv"
        path.write_text("1\n2\n3\n")
        assert run(["correlate", "--csv", str(path)]) == 2
