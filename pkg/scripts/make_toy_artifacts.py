"""Regenerate the bundled toy checkpoint and its reference metrics.

Run from the repository root: ``python scripts/make_toy_artifacts.py``.
The regression test in tests/test_cli.py compares ``hymoerec eval`` on the
checkpoint against the numbers written here, so only rerun this on purpose.
"""

import json
import shutil
import tempfile
from pathlib import Path

from hymoerec.cli import main
from hymoerec.data import load_dataset
from hymoerec.evaluation import evaluate
from hymoerec.training import load_checkpoint, restore

RES = Path(__file__).resolve().parents[1] / "src" / "hymoerec" / "resources"

TOY_OVERRIDES = [
    "d_model=16", "n_layers=1", "n_heads=2", "epochs=40", "eval_every=10", "patience=10",
]


def run() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        args = ["train", "--config", str(RES / "memorization.cfg"), "--output-dir", tmp]
        for item in TOY_OVERRIDES:
            args += ["--set", item]
        assert main(args) == 0
        shutil.copy(Path(tmp) / "last.ckpt", RES / "toy.ckpt")
    split = load_dataset(RES / "memorization.dataset.json")
    model, _, state = restore(load_checkpoint(RES / "toy.ckpt"))
    reference = {phase: evaluate(model, split, phase, state.step).as_dict() for phase in ("valid", "test")}
    (RES / "toy_metrics.json").write_text(json.dumps(reference, indent=2, sort_keys=True) + "\n")
    print(json.dumps(reference, indent=2))


if __name__ == "__main__":
    run()
