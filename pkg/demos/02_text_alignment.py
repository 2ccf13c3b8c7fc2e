"""Global alignment and masked-word prediction on a toy caption batch.

Run: python demos/02_text_alignment.py
"""
import math

import torch

from lgvq.semantic import (
    MaskAdapter,
    MaskedWordDecoder,
    apply_mask,
    gsa_loss,
    mtp_loss,
    predict_masked,
    sample_mask_ratio,
    truncnorm_mean,
)
from lgvq.text import ToyTextEncoder, Vocabulary

captions = ["a red circle at the left on black", "a blue bar at the top on white", "a pink cross at the right on gray"]
vocab = Vocabulary.build(captions)
text = ToyTextEncoder(vocab, dim=8, n=12, seed=0)
tokens = torch.tensor([text.tokenize(c) for c in captions])
seq, eot = text.encode(tokens)
print("vocabulary size:", len(vocab))
print("tokens of caption 0:", tokens[0].tolist())

# InfoNCE over the batch. Perfect alignment still pays for similar negatives.
print("gsa, global tokens = text:", gsa_loss(eot, eot).item())
print("gsa, random global tokens:", gsa_loss(torch.randn(3, 8), eot).item(), "~", 3 * math.log(3))

# Mask ratios come from a normal truncated to [0.5, 1].
gen = torch.Generator().manual_seed(0)
r = sample_mask_ratio(gen, 10_000)
print("mean ratio %.4f, closed form %.4f" % (r.mean().item(), truncnorm_mean(0.55, 0.25, 0.5, 1.0)))

# Mask words, adapt, then decode them from (here random) code tokens.
adapter = MaskAdapter(12, 8, heads=2)
decoder = MaskedWordDecoder(8, len(vocab), layers=1, heads=2)
masked = apply_mask(tokens, seq, sample_mask_ratio(gen, 3), gen, adapter, text.eot_id)
print("masked per caption:", masked.mask.sum(1).tolist())
code_tokens = torch.randn(3, 5, 8)
logits = predict_masked(code_tokens, masked, decoder)
print("mtp loss %.3f vs chance ln V = %.3f" % (mtp_loss(logits, masked.targets).item(), math.log(len(vocab))))
