"""Train the default spiking model briefly on a few FCG samples.

Takes a few minutes on one core. The comparison against persistence shows how
little the next crack segment can be anticipated from past frames.

    python demos/train_tiny_snn.py [epochs]
"""
import sys

import numpy as np

from microevo.fcg import build_fcg_library
from microevo.field import split_library, window_library
from microevo.models import ModelSpec, Persistence, TrainConfig, build_model, default_init_gain, one_step_mae, prior_logit, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
lib = build_fcg_library(30)
tr, te = split_library(lib, 20)
data, test = window_library(tr, 3, 1), window_library(te, 3, 1)

spec = ModelSpec("base_snn", output_bias=prior_logit(data.targets), init_gain=default_init_gain("base_snn"))
model = build_model(spec, seed=0)
res = train(model, data, TrainConfig(epochs=epochs))
for h in res.history:
    print(f"epoch {h['epoch']:3d}  train mse {h['train_loss']:.5f}  ({h['seconds']:.0f}s)")


class Binarized:
    in_len, out_len = 3, 1

    def predict(self, x):
        return (model.predict(x) >= 0.5).astype(np.float32)


print(f"persistence MAE  {one_step_mae(Persistence(), test):.5f}")
print(f"snn raw MAE      {one_step_mae(model, test):.5f}")
print(f"snn binarized    {one_step_mae(Binarized(), test):.5f}")
