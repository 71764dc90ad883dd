"""
Training the pose denoiser and sampling goal poses
==================================================

The denoiser sees a camera token, the instruction tokens and one token per
object (point-cloud and pose embeddings plus a role type). Only the movable
object's pose is noised. This toy run overfits a handful of instances, then
samples and scores goal poses on the same instances.
"""
import logging

from sport.datagen import default_catalog, generate_dataset
from sport.diffusion import DiffusionConfig, train
from sport.evaluation import aggregate, evaluate, summary_table
from sport.scene import Relation

logging.basicConfig(level=logging.WARNING)

instances = generate_dataset(default_catalog(), 8, [Relation.LEFT], master_seed=1)
config = DiffusionConfig(epochs=1500, batch=8, model_dim=32, blocks=2, heads=4, cloud_points=16, cloud_blocks=1,
                         lr=1e-3, lr_schedule="cosine", T=100)
state = train(instances, config, on_epoch=lambda e, l: print(f"epoch {e:4d} loss {l:.3f}") if e % 250 == 0 else None)

results, _ = evaluate(state, instances, seed=0)
report = aggregate(results)
print(summary_table(report))
print(f"mean translation error: {100 * report.mean_translation_error:.1f} cm")
