"""
The two attention blocks, poked at directly
===========================================

MAFM mixes three dilated 3x3 convolutions (rates 3, 5, 7) and scales them by
a channel gate computed from a pooled descriptor, then adds the input back.
CRM is non-local attention: every pixel's context is a softmax-weighted
average of value vectors over all pixels, followed by a norm and an MLP.

python notebooks/02_attention_blocks.py
"""

# %%
import torch

from dagan import CRM, MAFM

torch.manual_seed(0)
x = torch.randn(1, 8, 16, 16)

mafm = MAFM(8)
print("MAFM out", tuple(mafm(x).shape), "gate", mafm.gate(x).flatten()[:4])

# %% [markdown]
# With the dilated branches zeroed the block is the identity: the residual
# path carries the input untouched.

# %%
with torch.no_grad():
    for conv in mafm.branches:
        conv.weight.zero_()
        if conv.bias is not None:
            conv.bias.zero_()
print("identity when branches are zero:", torch.allclose(mafm(x), x))

# %%
crm = CRM(8)
attn, v = crm.attention(x)
print("attention", tuple(attn.shape), "row sums", attn.sum(-1).min().item(), attn.sum(-1).max().item())

# %% [markdown]
# Each context vector is a convex combination of value vectors, so a
# spatially constant input gives the same attention row everywhere and a
# spatially constant context.

# %%
flat = torch.randn(1, 8, 1, 1).expand(1, 8, 16, 16).contiguous()
ctx = crm.context(flat)
print("context spread over pixels:", (ctx - ctx[..., :1, :1]).abs().max().item())

# shuffling pixels shuffles the context the same way
perm = torch.randperm(16 * 16)
shuffled = x.flatten(2)[..., perm].view_as(x)
same = torch.allclose(crm.context(shuffled).flatten(2), crm.context(x).flatten(2)[..., perm], atol=1e-5)
print("permutation equivariant:", same)
