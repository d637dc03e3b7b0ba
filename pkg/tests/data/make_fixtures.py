"""Regenerate the bundled smoke fixtures.

Run from the repository root after an intentional model change:

    python3 tests/data/make_fixtures.py

and commit the results. The golden CSV freezes the evaluation output of
the smoke checkpoint on the 10-graph corpus; test_cli compares against
it byte for byte.
"""

from pathlib import Path

from floorgraph.cli import main

HERE = Path(__file__).parent


def build():
    corpus_dir = HERE / "smoke_corpus"
    assert main([
        "synth", "--count", "10", "--seed", "2024", "--out", str(corpus_dir),
        "--min-rooms", "4", "--max-rooms", "8",
    ]) == 0

    run_dir = HERE / "smoke_run"
    assert main([
        "train", "--data", str(corpus_dir), "--out", str(run_dir),
        "--sets", "1,2", "--k", "1", "--hidden", "6",
        "--epochs", "3", "--patience", "3", "--lr", "0.001", "--seed", "12",
    ]) == 0
    (HERE / "smoke_checkpoint.json").write_bytes((run_dir / "checkpoint.json").read_bytes())

    assert main([
        "eval", "--ckpt", str(HERE / "smoke_checkpoint.json"),
        "--data", str(corpus_dir), "--split", "test",
        "--report", str(HERE / "golden_eval.csv"),
    ]) == 0

    # keep only what the test needs
    for extra in (run_dir / "checkpoint.json", run_dir / "history.json", run_dir / "resolved.json"):
        extra.unlink(missing_ok=True)
    run_dir.rmdir()
    (HERE / "golden_eval.txt").unlink(missing_ok=True)
    golden_txt = HERE / "golden_eval.csv"
    print("fixtures written:", sorted(p.name for p in HERE.iterdir()))


if __name__ == "__main__":
    build()
