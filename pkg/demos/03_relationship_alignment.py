"""Word-pair similarity carried over to matched codes.

Run: python demos/03_relationship_alignment.py
"""
import torch

from lgvq.relation import content_word_ids, match_positions, ras_loss, select_word_pairs
from lgvq.text import ToyTextEncoder, Vocabulary

caption = "a red circle at the left on black"
vocab = Vocabulary.build([caption])
text = ToyTextEncoder(vocab, dim=8, n=12, seed=0)
tokens = text.tokenize(caption)

words = content_word_ids(tokens, text)
print("content words:", [text.token_string(w) for w in words])
pairs = select_word_pairs(words, max_pairs=32, seed=0)
print("pairs:", len(pairs))

# Pretend image: 4 grid codes and their contextual tokens (global token first).
torch.manual_seed(0)
code_tokens = torch.randn(5, 8)
grid = torch.randn(4, 6, requires_grad=True)
print("matched positions:", match_positions(text.word_table[words], code_tokens).tolist())

# Only the codes move; a few steps shrink the similarity gap. Words matched
# to the same position keep similarity 1, so the loss levels off above 0.
opt = torch.optim.SGD([grid], lr=0.1)
for step in range(51):
    loss = ras_loss(pairs, text.word_table, code_tokens, grid)
    if step % 10 == 0:
        print(f"step {step:2d} ras {loss.item():.4f}")
    opt.zero_grad()
    loss.backward()
    opt.step()
