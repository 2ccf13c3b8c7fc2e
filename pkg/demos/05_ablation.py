"""Codebook usage with and without the text losses, on identical seeds.

Run: python demos/05_ablation.py   (about 2 minutes)
"""
import tempfile

import numpy as np

from lgvq import CaptionDataset, TrainConfig, Trainer, make_toy_corpus
from lgvq.evaluation import codebook_usage, code_word_similarity_mse

dataset = CaptionDataset.from_manifest(make_toy_corpus(tempfile.mkdtemp(), 32), 64)
settings = {"vq only": dict(alpha=0.0, beta=0.0, gamma=0.0), "no ras": dict(gamma=0.0), "all losses": {}}

for name, weights in settings.items():
    usage, mse = [], []
    for seed in (0, 1, 2):
        t = Trainer(TrainConfig().replace(lr=1e-3, seed=seed, **weights), dataset)
        t.run()
        usage.append(codebook_usage(t.model, dataset)[0])
        mse.append(code_word_similarity_mse(t.model, dataset))
    print(f"{name:10s} usage {np.mean(usage):5.1f}%  similarity mse {np.mean(mse):.3f}")
