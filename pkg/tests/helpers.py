"""Shared test plumbing (not oracles): parameter access by name."""

from __future__ import annotations

import re


def weight_accessors(model):
    """(name, getter, setter) for every trainable array in the model,
    selection scores included. Setters rebind the DenseArray object itself,
    which is what finite-difference checks over a swapped-in leaf need."""
    out = []
    direct = {"embed.w": "embed_w", "embed.b": "embed_b", "pos_emb": "pos_emb",
              "time.w": "time_w", "time.b": "time_b",
              "final_gain": "final_gain", "out.w": "out_w", "out.b": "out_b"}
    block_direct = {"attn_gain": "attn_gain", "mlp_gain": "mlp_gain",
                    "mlp.w1": "mlp_w1", "mlp.b1": "mlp_b1",
                    "mlp.w2": "mlp_w2", "mlp.b2": "mlp_b2"}

    def make(container, attr):
        return (lambda: getattr(container, attr),
                lambda v: setattr(container, attr, v))

    for name, _ in model.named_weights():
        m = re.match(r"layers\.(\d+)\.(.+)", name)
        if m is None:
            getter, setter = make(model, direct[name])
        else:
            blk = model.blocks[int(m.group(1))]
            rest = m.group(2)
            if rest in block_direct:
                getter, setter = make(blk, block_direct[rest])
            else:  # attn.w_q / attn.w_k / attn.w_v / attn.hh_wq / attn.hh_wk
                getter, setter = make(blk.attn, rest.split(".", 1)[1])
        out.append((name, getter, setter))
    for i, blk in enumerate(model.blocks):
        if blk.r is not None:
            out.append((f"layers.{i}.r", *make(blk, "r")))
    return out
