# %% [markdown]
# # A short tour
#
# Generate a few synthetic scenes, pretrain a small model for a couple of
# hundred steps, then check masked-word accuracy and a few greedy captions.
# Runs in under half a minute on one core.

# %%
import numpy as np

from tden.data import PREDICATES, World, gen_splits
from tden.downstream import generate_caption
from tden.nn import ModelConfig
from tden.train import TrainConfig, evaluate_pretraining, pretrain

world = World.create()
splits = gen_splits(world, seed=0, sizes=(256, 64, 8))
v = world.vocab
predicate_of = {v.pred_word(k): name for k, name in enumerate(PREDICATES)}


def words(ids):
    out = []
    for i in ids:
        if (c := v.word_class(i)) is not None:
            out.append(f"class{c}")
        elif (a := v.word_attr(i)) is not None:
            out.append(f"attr{a}")
        elif i == v.the:
            out.append("the")
        elif i in predicate_of:
            out.append(predicate_of[i])
        else:
            out.append(f"<{i}>")
    return " ".join(out)


rec = splits["train"][0]
print(len(rec.regions), "regions; caption:", words(rec.caption))

# %% [markdown]
# Pretrain with the full objective and single-pass masking.

# %%
cfg = ModelConfig()
result = pretrain(cfg, TrainConfig(steps=200, batch_size=16), splits["train"])
first = np.mean([m["loss"] for m in result.metrics[:10]])
last = np.mean([m["loss"] for m in result.metrics[-10:]])
print(f"loss {first:.3f} -> {last:.3f}")
print(evaluate_pretraining(result.model, splits["val"]))

# %% [markdown]
# Greedy captions for held-out scenes next to the reference.

# %%
for rec in splits["test"][:4]:
    pred = generate_caption(result.model, rec.regions, mode="greedy")
    print(f"{words(rec.caption):45s} | {words(pred)}")
