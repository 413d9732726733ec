import logging
import sys
from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import typer

try:  # typer >= 0.2x vendors its own click; its exceptions live here
    from typer._click import exceptions as click
except ImportError:
    import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from favtune_cli.config import PipelineConfig, settings
from favtune_cli.errors import FavtuneError
from favtune_cli.metrics import evaluate, histogram_rows, kendall_tau, pattern_similarity, report_rows
from favtune_cli.midi_io import Score, read_smf_file, select_melody_track, write_smf_file
from favtune_cli.pattern import dumps_smpi
from favtune_cli.remi_codec import EventFamily, decode, dumps_tokens, encode, selected_stream
from favtune_cli.storage import (
    RunDirectory,
    dumps_rows,
    load_checkpoint,
    load_smpi,
    load_tokens,
    save_checkpoint,
    save_report,
    save_smpi,
    save_tokens,
)
from favtune_cli.training import train_for_favorite
from favtune_cli.transfer import favorite_smpi, transfer_score

app = typer.Typer(help="favtune - transfer a MIDI piece toward your favorite one")
console = Console(stderr=True)


class Selection(str, Enum):
    note_on = "note-on"
    note_duration = "note-duration"
    position = "position"


class ModelKind(str, Enum):
    attention = "attention"
    ngram = "ngram"


@contextmanager
def _guarded():
    """Print domain and I/O failures as one line and exit with their code"""
    try:
        yield
    except FavtuneError as e:
        console.print(f"❌ {type(e).__name__}: {e}", markup=False, highlight=False)
        raise typer.Exit(code=e.exit_code)
    except OSError as e:
        console.print(f"❌ {type(e).__name__}: {e}", markup=False, highlight=False)
        raise typer.Exit(code=3)


def _config(
    config: Optional[Path],
    seed: Optional[int] = None,
    select: Optional[Selection] = None,
    pattern_length: Optional[int] = None,
    temperature: Optional[float] = None,
    epochs: Optional[int] = None,
    model: Optional[ModelKind] = None,
) -> PipelineConfig:
    cfg = settings.pipeline_config(config)
    return cfg.with_overrides(
        seed=seed,
        selected=(EventFamily.parse(select.value),) if select else None,
        pattern_length=pattern_length,
        temperature=temperature,
        epochs=epochs,
        model=model.value if model else None,
    )


def _track(score: Score, track: Optional[int]) -> int:
    if track is None:
        return select_melody_track(score)
    if not 0 <= track < len(score.tracks):
        raise typer.BadParameter(f"track {track} does not exist ({len(score.tracks)} tracks)", param_hint="--track")
    return track


def _write_or_echo(text: str, out: Optional[Path]):
    if out:
        out.write_text(text, encoding="utf-8")
        console.print(f"✅ Wrote [bold green]{out}[/bold green]")
    else:
        typer.echo(text, nl=False)


CONFIG_OPTION = typer.Option(None, "--config", help="Pipeline config file (key=value lines)")
SEED_OPTION = typer.Option(None, "--seed", help="Random seed")
SELECT_OPTION = typer.Option(None, "--select", help="Event family to transfer")


@app.callback()
def main(verbose: int = typer.Option(0, "--verbose", "-v", count=True, help="Log progress (-vv for debug)")):
    """Set up logging on the error stream"""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


@app.command("tokenize")
def tokenize(
    midi: Path = typer.Argument(..., help="MIDI file"),
    track: Optional[int] = typer.Option(None, "--track", help="Track index (default: most notes)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Token file (default: stdout)"),
):
    """Encode one MIDI track as REMI token text"""
    with _guarded():
        score = read_smf_file(midi)
        seq = encode(score, _track(score, track))
        _write_or_echo(dumps_tokens(seq), out)


@app.command("detokenize")
def detokenize(
    tokens: Path = typer.Argument(..., help="Token file"),
    template: Path = typer.Option(..., "--template", help="MIDI file supplying the other tracks and timing"),
    out: Path = typer.Option(..., "--out", help="Output MIDI file"),
    track: Optional[int] = typer.Option(None, "--track", help="Track to replace (default: most notes)"),
):
    """Decode token text onto a template MIDI file"""
    with _guarded():
        seq = load_tokens(tokens)
        base = read_smf_file(template)
        index = _track(base, track) if base.note_count or track is not None else 0
        write_smf_file(decode(seq, base, index), out)
        console.print(f"✅ Wrote [bold green]{out}[/bold green]")


@app.command("train")
def train(
    favorite: Path = typer.Option(..., "--favorite", help="Favorite MIDI file"),
    out: Path = typer.Option(..., "--out", help="Checkpoint file"),
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    select: Optional[Selection] = SELECT_OPTION,
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Maximum fine-tuning epochs"),
    model: Optional[ModelKind] = typer.Option(None, "--model", help="Predictor kind"),
    loss_csv: Optional[Path] = typer.Option(None, "--loss-csv", help="Write the loss curve as CSV"),
):
    """Fine-tune a predictor on the favorite piece"""
    with _guarded():
        cfg = _config(config, seed, select, epochs=epochs, model=model)
        checkpoint = train_for_favorite(read_smf_file(favorite), cfg)
        save_checkpoint(checkpoint, out)
        if loss_csv:
            save_report([{"epoch": i, "loss": v} for i, v in enumerate(checkpoint.loss_curve, 1)], loss_csv)
        final = f"{checkpoint.loss_curve[-1]:.4f}" if checkpoint.loss_curve else "n/a"
        console.print(f"✅ Trained [bold]{checkpoint.kind}[/bold] model, final loss {final}: "
                      f"[bold green]{out}[/bold green]")


@app.command("extract-pattern")
def extract_pattern(
    favorite: Path = typer.Option(..., "--favorite", help="Favorite MIDI file"),
    out: Optional[Path] = typer.Option(None, "--out", help="SMPI file (default: stdout)"),
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    select: Optional[Selection] = SELECT_OPTION,
    pattern_length: Optional[int] = typer.Option(None, "--pattern-length", help="SMP length a"),
):
    """Extract the favorite's signature pattern as an interval line"""
    with _guarded():
        cfg = _config(config, seed, select, pattern_length=pattern_length)
        smp, smpi = favorite_smpi(read_smf_file(favorite), frozenset(cfg.selected), cfg.pattern_length,
                                  cfg.seed, cfg.pattern_mode)
        console.print(f"🎵 SMP {list(smp.values)}", markup=False, highlight=False)
        _write_or_echo(dumps_smpi(smpi), out)


@app.command("transfer")
def transfer(
    input_file: Path = typer.Option(..., "--input", help="MIDI file to transfer"),
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Trained checkpoint"),
    out: Path = typer.Option(..., "--out", help="Output MIDI file"),
    smpi: Optional[Path] = typer.Option(None, "--smpi", help="SMPI file"),
    favorite: Optional[Path] = typer.Option(None, "--favorite", help="Favorite MIDI (when no --smpi)"),
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    select: Optional[Selection] = SELECT_OPTION,
    temperature: Optional[float] = typer.Option(None, "--temperature", help="Sampling temperature (0 = greedy)"),
    pattern_length: Optional[int] = typer.Option(None, "--pattern-length", help="SMP length a"),
):
    """Transfer the input's melody track toward the favorite"""
    if smpi is None and favorite is None:
        raise typer.BadParameter("pass --smpi or --favorite", param_hint="--smpi")
    with _guarded():
        cfg = _config(config, seed, select, pattern_length=pattern_length, temperature=temperature)
        outcome = transfer_score(
            read_smf_file(input_file),
            read_smf_file(favorite) if smpi is None else None,
            load_checkpoint(checkpoint),
            cfg.transfer_config(),
            cfg.pattern_length,
            cfg.pattern_mode,
            smpi=load_smpi(smpi) if smpi else None,
        )
        write_smf_file(outcome.score, out)
        result = outcome.result
        console.print(f"✅ Transferred track {outcome.track}: {result.triggers} triggers, "
                      f"{len(result.forced_slots)} forced slots -> [bold green]{out}[/bold green]")


@app.command("evaluate")
def evaluate_cmd(
    a: Path = typer.Option(..., "--a", help="Reference MIDI"),
    b: Path = typer.Option(..., "--b", help="Candidate MIDI"),
    out: Optional[Path] = typer.Option(None, "--out", help="Report CSV (default: stdout)"),
    config: Optional[Path] = CONFIG_OPTION,
):
    """D_P, D_N, D_D, D_IOI and PS of b against a"""
    with _guarded():
        cfg = _config(config)
        report = evaluate(read_smf_file(a), read_smf_file(b), cfg.ps_lengths, cfg.selected, cfg.ps_normalized)
        _write_or_echo(dumps_rows(report_rows(report)), out)


@app.command("similarity")
def similarity(
    a: Path = typer.Option(..., "--a", help="Reference MIDI"),
    b: Path = typer.Option(..., "--b", help="Candidate MIDI"),
    p: Optional[List[int]] = typer.Option(None, "--p", min=1, help="Pattern length (repeatable; default 2..5)"),
    normalized: bool = typer.Option(False, "--normalized", help="Score every window"),
    select: Optional[Selection] = SELECT_OPTION,
    config: Optional[Path] = CONFIG_OPTION,
):
    """Pattern similarity of b against a for each p"""
    with _guarded():
        cfg = _config(config, select=select)
        ref, cand = read_smf_file(a), read_smf_file(b)
        x = selected_stream(encode(ref, select_melody_track(ref)), cfg.selected)
        y_hat = selected_stream(encode(cand, select_melody_track(cand)), cfg.selected)
        lengths = p or list(cfg.ps_lengths)
        rows = [{"p": n, "ps": pattern_similarity(x, y_hat, n, normalized or cfg.ps_normalized)} for n in lengths]
        typer.echo(dumps_rows(rows), nl=False)


def _column(text: str, name: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise typer.BadParameter(f"expected comma-separated numbers, got '{text}'", param_hint=name)


def _csv_columns(path: Path) -> Tuple[List[float], List[float]]:
    """First two columns of a CSV file; a non-numeric first row is a header"""
    rows = [line.split(",") for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    try:
        float(rows[0][0])
    except (ValueError, IndexError):
        rows = rows[1:]
    xs, ys = [], []
    for number, row in enumerate(rows, 1):
        try:
            xs.append(float(row[0]))
            ys.append(float(row[1]))
        except (ValueError, IndexError):
            raise typer.BadParameter(f"data row {number} is not two numbers: '{','.join(row)}'", param_hint="--csv")
    return xs, ys


@app.command("correlate")
def correlate(
    x: Optional[str] = typer.Option(None, "--x", help="Comma-separated values"),
    y: Optional[str] = typer.Option(None, "--y", help="Comma-separated values"),
    csv_file: Optional[Path] = typer.Option(None, "--csv", help="CSV whose first two columns are x and y"),
):
    """Kendall tau-b between two numeric columns"""
    with _guarded():
        if csv_file:
            xs, ys = _csv_columns(csv_file)
        elif x is not None and y is not None:
            xs, ys = _column(x, "--x"), _column(y, "--y")
        else:
            raise typer.BadParameter("pass --x and --y, or --csv", param_hint="--x")
        tau, p_value = kendall_tau(xs, ys)
        typer.echo(dumps_rows([{"tau": tau, "p_value": p_value}]), nl=False)


def _summary(label: str, report) -> Table:
    table = Table(title=label)
    table.add_column("Metric", style="cyan", no_wrap=True)
    table.add_column("Value", style="magenta")
    for name, value in (("D_P", report.d_p), ("D_N", report.d_n), ("D_D", report.d_d), ("D_IOI", report.d_ioi)):
        table.add_row(name, f"{value:.4f}")
    for p, value in sorted(report.ps_by_p.items()):
        table.add_row(f"PS p={p}", f"{value:.4f}")
    return table


@app.command("pipeline")
def pipeline(
    favorite: Path = typer.Option(..., "--favorite", help="Favorite MIDI file"),
    input_file: Path = typer.Option(..., "--input", help="MIDI file to transfer"),
    out: str = typer.Option(..., "--out", help="Run directory (a bare name goes under FAVTUNE_RUN_ROOT)"),
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    select: Optional[Selection] = SELECT_OPTION,
    pattern_length: Optional[int] = typer.Option(None, "--pattern-length", help="SMP length a"),
    temperature: Optional[float] = typer.Option(None, "--temperature", help="Sampling temperature (0 = greedy)"),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Maximum fine-tuning epochs"),
    model: Optional[ModelKind] = typer.Option(None, "--model", help="Predictor kind"),
):
    """Train, extract, transfer and evaluate into one run directory"""
    with _guarded():
        cfg = _config(config, seed, select, pattern_length, temperature, epochs, model)
        run = RunDirectory(settings.resolve_run_dir(out)).create()
        manifest = run.new_manifest(cfg)
        manifest.record_input("favorite", favorite)
        manifest.record_input("input", input_file)
        fav, inp = read_smf_file(favorite), read_smf_file(input_file)

        fav_tokens = encode(fav, select_melody_track(fav))
        inp_tokens = encode(inp, select_melody_track(inp))
        save_tokens(fav_tokens, run.tokens_dir / "favorite.tokens")
        save_tokens(inp_tokens, run.tokens_dir / "input.tokens")
        manifest.record_stage("tokenize", run.root, [run.tokens_dir / "favorite.tokens",
                                                     run.tokens_dir / "input.tokens"])

        with console.status("Training predictor..."):
            checkpoint = train_for_favorite(fav, cfg)
        ckpt_file = run.checkpoints_dir / "predictor.ckpt"
        save_checkpoint(checkpoint, ckpt_file)
        loss_file = run.reports_dir / "loss.csv"
        save_report([{"epoch": i, "loss": v} for i, v in enumerate(checkpoint.loss_curve, 1)], loss_file)
        manifest.record_stage("train", run.root, [ckpt_file, loss_file])

        selected = frozenset(cfg.selected)
        _, smpi = favorite_smpi(fav, selected, cfg.pattern_length, cfg.seed, cfg.pattern_mode)
        smpi_file = run.patterns_dir / "smpi.txt"
        save_smpi(smpi, smpi_file)
        manifest.record_stage("extract-pattern", run.root, [smpi_file])

        outcome = transfer_score(inp, None, checkpoint, cfg.transfer_config(), smpi=smpi)
        write_smf_file(outcome.score, run.transferred_file)
        save_tokens(outcome.output_tokens, run.tokens_dir / "transferred.tokens")
        manifest.record_stage("transfer", run.root, [run.transferred_file, run.tokens_dir / "transferred.tokens"])

        before = evaluate(fav, inp, cfg.ps_lengths, cfg.selected, cfg.ps_normalized)
        after = evaluate(fav, outcome.score, cfg.ps_lengths, cfg.selected, cfg.ps_normalized)
        report_file = run.reports_dir / "report.csv"
        save_report(
            [{"comparison": "input_vs_favorite", **r} for r in report_rows(before)]
            + [{"comparison": "transferred_vs_favorite", **r} for r in report_rows(after)],
            report_file,
        )
        ps_file = run.reports_dir / "ps.csv"
        save_report([{"p": p, "input": before.ps_by_p[p], "transferred": after.ps_by_p[p]}
                     for p in sorted(after.ps_by_p)], ps_file)
        hist_file = run.reports_dir / "histograms.csv"
        save_report(
            histogram_rows(fav, select_melody_track(fav), "favorite")
            + histogram_rows(inp, outcome.track, "input")
            + histogram_rows(outcome.score, outcome.track, "transferred"),
            hist_file,
        )
        manifest.record_stage("evaluate", run.root, [report_file, ps_file, hist_file])
        manifest.save(run.manifest_file)

        console.print(_summary("Transferred vs favorite", after))
        console.print(f"✅ Run complete: [bold green]{run.root}[/bold green]")
        typer.echo(str(run.root))


def run(argv: Optional[List[str]] = None) -> int:
    """Invoke the CLI without exiting the interpreter; returns the exit code"""
    command = typer.main.get_command(app)
    try:
        rv = command.main(args=argv, prog_name="favtune", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 2
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        return 1
    except FavtuneError as e:
        console.print(f"❌ {type(e).__name__}: {e}", markup=False, highlight=False)
        return e.exit_code
    except OSError as e:
        console.print(f"❌ {type(e).__name__}: {e}", markup=False, highlight=False)
        return 3
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(run())
