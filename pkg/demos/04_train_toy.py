"""Train on the synthetic corpus, evaluate and dump the codebook.

Run: python demos/04_train_toy.py [out_dir]
Takes about 20 s on a laptop CPU.
"""
import sys
from pathlib import Path

from lgvq import CaptionDataset, TrainConfig, Trainer, make_toy_corpus, save_checkpoint
from lgvq.evaluation import dataset_psnr, dump_codebook_images, evaluate

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
manifest = make_toy_corpus(out / "corpus", count=32, size=64, seed=0)
print(manifest.read_text().splitlines()[0])

dataset = CaptionDataset.from_manifest(manifest, 64)
cfg = TrainConfig().replace(manifest=str(manifest), steps=200, lr=1e-3, seed=0)
trainer = Trainer(cfg, dataset)
print("PSNR before: %.2f dB" % dataset_psnr(trainer.model, dataset))

history = trainer.run(metrics_path=out / "metrics.jsonl")
for m in history[::50] + history[-1:]:
    print("step {step:3d} total {total:.3f} vq {vq:.3f} gsa {gsa:.2f} mtp {mtp:.2f} ras {ras:.2f}".format(**m))

report = evaluate(trainer.model, dataset)
print(report.to_json())
save_checkpoint(out / "final.pt", trainer)
dump_codebook_images(trainer.model, out / "codebook")
print("wrote", out)
