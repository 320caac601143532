"""Plain first-order Reptile, written without the trainer.

Shares only the network primitives and the episode sampler with the package:
no refinement, no weight stores, no unified loss. Each epoch adapts every task
from the epoch-start parameters, then moves toward their mean (summed in task
order).
"""
import numpy as np

from metaforge import autodiff as ad
from metaforge.data import sample_task
from metaforge.model import backward, forward, init_params
from metaforge.rng import derive_key


def plain_reptile(dataset, seed, meta_epochs, tasks_per_epoch=10, inner_steps=5, inner_lr=0.05, outer_eps=0.5,
                  n_range=(2, 5), k_range=(1, 10), query_per_class=5, channels=(16, 32, 64)):
    theta = init_params(seed, dataset.num_classes_total, dataset.image_shape[0], channels)
    lr = np.float32(inner_lr)
    eps = np.float32(outer_eps)
    for epoch in range(meta_epochs):
        ep_seed = derive_key(seed, "epoch", epoch)
        phis = []
        for t in range(tasks_per_epoch):
            ep = sample_task(dataset, n_range, k_range, "train", ep_seed, t, query_per_class)
            X = np.stack([s.image for s in ep.support])
            y = np.asarray([s.position for s in ep.support])
            w = {k: v for k, v in theta}
            for _ in range(inner_steps):
                fr = forward(type(theta)(w), X, ep.class_subset)
                grads, _ = backward(fr.tape, loss=ad.mean_cross_entropy(fr.logits, y))
                w = {k: v - lr * grads[k] for k, v in w.items()}
            phis.append(w)
        new = {}
        for k, v in theta:
            total = phis[0][k]
            for phi in phis[1:]:
                total = total + phi[k]
            mean = total / np.float32(len(phis))
            new[k] = v + eps * (mean - v)
        theta = type(theta)(new)
    return theta
