"""
The whole pipeline, end to end
==============================

Generate a synthetic frame dataset, train the tiny ensemble on it,
evaluate on the held-out split, classify a single frame, and render the
embedding map -- exactly what the five CLI commands do, driven from one
script.  Everything lands under demos/output/full_pipeline/.
"""

from pathlib import Path

from endoclass.cli import main

out = Path(__file__).parent / "output" / "full_pipeline"
data = out / "data"
run = out / "run"
out.mkdir(parents=True, exist_ok=True)

# 1. A stand-in dataset: ten separable classes, twelve frames each.
assert main(["synth", "--out", str(data), "--per-class", "12", "--seed", "0"]) == 0

# 2. Describe the run in a config file.  Everything not listed keeps its
#    default; the tiny variant swaps in the small backbones so this
#    finishes in seconds on a laptop.
cfg = out / "run.cfg"
cfg.write_text(
    f"data_root = {data}\n"
    f"output_dir = {run}\n"
    "seed = 7\n"
    "model.variant = tiny\n"
    "training.epochs = 6\n"
    "training.lr = 0.003\n"
    "training.batch_size = 32\n"
    "tsne.iterations = 250\n"
)

# 3. Train.  Prints one line per epoch; writes best.ckpt, curves.png/csv,
#    history.json, manifest.csv and a copy of the resolved config.
assert main(["train", "--config", str(cfg)]) == 0

# 4. Evaluate the best checkpoint on the validation split: report.json,
#    confusion.png/csv, roc.png/json.
assert main(["evaluate", "--ckpt", str(run / "best.ckpt"),
             "--data", str(data), "--split", "val", "--out", str(run)]) == 0

# 5. Classify one file.  predictions.csv gets the argmax class,
#    probabilities.json the full distribution.
some_frame = next((data / "Bleeding").glob("*.png"))
assert main(["predict", "--ckpt", str(run / "best.ckpt"),
             "--input", str(some_frame), "--out", str(run)]) == 0
print((run / "predictions.csv").read_text().strip())

# 6. Project the validation frames' ensemble features to 2-D:
#    tsne.png and its machine-readable twin tsne.csv.
assert main(["visualize", "--ckpt", str(run / "best.ckpt"),
             "--data", str(data), "--split", "val", "--out", str(run)]) == 0

print(f"\nall artifacts under {run}")
for artifact in sorted(run.iterdir()):
    print(f"  {artifact.name}")
