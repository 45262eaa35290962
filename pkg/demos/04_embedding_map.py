"""
Seeing what the ensemble learned
================================

Train the tiny ensemble briefly, pull the 48-dimensional concatenated
features for every validation frame, and project them to 2-D with the
exact t-SNE solver.  On the separable synthetic classes a few epochs are
enough for the clusters to pull apart; the picture and its
machine-readable twin land under demos/output/embedding/.
"""

from pathlib import Path

from endoclass.dataset import SplitSpec, scan_dataset, stratified_split
from endoclass.models import build_ensemble, extract_features
from endoclass.plots import render_embedding
from endoclass.preprocess import AugmentationPolicy, NormalizationStats
from endoclass.synth import generate_dataset
from endoclass.training import TrainingConfig, fit
from endoclass.tsne import TsneConfig, tsne_embed

out = Path(__file__).parent / "output" / "embedding"
generate_dataset(out / "data", per_class=12, seed=0)
manifest = stratified_split(scan_dataset(out / "data"),
                            SplitSpec(train_fraction=0.8, seed=5))

# A short tiny-variant run; fit() prints one line per epoch.
model = build_ensemble("tiny", manifest.class_set, seed=5, input_size=32)
cfg = TrainingConfig(lr=0.003, batch_size=32, epochs=5, seed=5)
stats = NormalizationStats()
history, _ = fit(model, manifest, cfg, stats=stats,
                 policy=AugmentationPolicy(), input_size=32)

# Features come from the deterministic eval path: both backbones' pooled
# activations, concatenated.
frames = manifest.frames_for("val")
features, labels = extract_features(model, frames, stats, input_size=32)
print(f"\n{features.shape[0]} validation frames, "
      f"{features.shape[1]}-dimensional features")

# The solver reports the KL divergence it starts and ends at; a healthy
# run decreases it.
emb = tsne_embed(features, labels, TsneConfig(perplexity=8.0, iterations=400,
                                              seed=5))
print(f"KL divergence: {emb.initial_kl:.3f} at start, {emb.final_kl:.3f} at end")

png = out / "tsne.png"
render_embedding(emb, manifest.class_set, png, out / "tsne.csv")
print(f"wrote {png} and its csv twin")
