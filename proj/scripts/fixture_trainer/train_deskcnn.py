#!/usr/bin/env python3
"""Train the DeskCNN fixture on MNIST and export model containers.

Produces two containers readable by the C++ loader:
  <out>/deskcnn_mnist      dense model
  <out>/deskcnn_mnist_p40  magnitude-pruned (40% on NB-SMT-eligible convs) + finetuned

Only needed to regenerate the checked-in fixtures; the C++ build and tests do
not depend on this script or on torch.
"""
import argparse
import gzip
import json
import os
import struct
import zlib

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

MEAN, STD = 0.1307, 0.3081


def read_idx(path):
    with gzip.open(path, "rb") as f:
        data = f.read()
    magic = struct.unpack(">I", data[:4])[0]
    if magic == 0x803:
        n, h, w = struct.unpack(">III", data[4:16])
        return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    if magic == 0x801:
        n = struct.unpack(">I", data[4:8])[0]
        return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)
    raise ValueError(f"bad idx magic {magic:#x} in {path}")


def load_split(root, prefix):
    x = read_idx(os.path.join(root, f"{prefix}-images-idx3-ubyte.gz"))
    y = read_idx(os.path.join(root, f"{prefix}-labels-idx1-ubyte.gz"))
    x = (torch.from_numpy(x.astype(np.float32)) / 255.0 - MEAN) / STD
    return x, torch.from_numpy(y)


class DeskCNN(nn.Module):
    def __init__(self, widths=(16, 32, 32, 32)):
        super().__init__()
        c1, c2, c3, c4 = widths
        self.conv1 = nn.Conv2d(1, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c2)
        self.conv3 = nn.Conv2d(c2, c3, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(c3)
        self.conv4 = nn.Conv2d(c3, c4, 3, padding=1, bias=False)
        self.bn4 = nn.BatchNorm2d(c4)
        self.fc = nn.Linear(c4 * 7 * 7, 10)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.max_pool2d(F.relu(self.bn2(self.conv2(x))), 2)
        x = F.max_pool2d(F.relu(self.bn3(self.conv3(x))), 2)
        x = F.relu(self.bn4(self.conv4(x)))
        return self.fc(torch.flatten(x, 1))


ELIGIBLE = ("conv2", "conv3", "conv4")


def evaluate(model, x, y):
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(x), 1000):
            correct += (model(x[i:i + 1000]).argmax(1) == y[i:i + 1000]).sum().item()
    return correct / len(x)


def train_epochs(model, x, y, epochs, lr, gen, masks=None):
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    steps = epochs * ((len(x) + 127) // 128)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps)
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), 128):
            idx = perm[i:i + 128]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            if masks:
                with torch.no_grad():
                    for name, m in masks.items():
                        getattr(model, name).weight.mul_(m)
        print(f"  epoch {epoch + 1}/{epochs} loss {loss.item():.4f}", flush=True)


def magnitude_masks(model, sparsity):
    masks = {}
    for name in ELIGIBLE:
        w = getattr(model, name).weight.detach().flatten()
        k = int(np.ceil(sparsity * w.numel()))
        order = np.argsort(np.abs(w.numpy()), kind="stable")
        m = np.ones(w.numel(), dtype=np.float32)
        m[order[:k]] = 0.0
        masks[name] = torch.from_numpy(m).reshape(getattr(model, name).weight.shape)
    return masks


def write_blob(out_dir, fname, t):
    arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
    raw = arr.tobytes()
    with open(os.path.join(out_dir, fname), "wb") as f:
        f.write(raw)
    return {"file": fname, "shape": list(arr.shape), "bytes": len(raw), "crc32": zlib.crc32(raw) & 0xFFFFFFFF}


def export(model, out_dir, metadata):
    os.makedirs(out_dir, exist_ok=True)
    layers = []

    def conv(name, exempt):
        c = getattr(model, name)
        bias = c.bias if c.bias is not None else torch.zeros(c.out_channels)
        layers.append({
            "kind": "conv2d", "name": name, "shape": list(c.weight.shape),
            "stride": c.stride[0], "padding": c.padding[0], "nbsmt_exempt": exempt,
            "blob": {"weight": write_blob(out_dir, f"{name}.weight.bin", c.weight),
                     "bias": write_blob(out_dir, f"{name}.bias.bin", bias)},
        })

    def bn(name):
        b = getattr(model, name)
        layers.append({
            "kind": "batchnorm", "name": name, "shape": [b.num_features],
            "eps": b.eps, "momentum": b.momentum,
            "blob": {"gamma": write_blob(out_dir, f"{name}.gamma.bin", b.weight),
                     "beta": write_blob(out_dir, f"{name}.beta.bin", b.bias),
                     "running_mean": write_blob(out_dir, f"{name}.running_mean.bin", b.running_mean),
                     "running_var": write_blob(out_dir, f"{name}.running_var.bin", b.running_var)},
        })

    conv("conv1", True)
    layers.append({"kind": "relu", "name": "relu1"})
    for i, pool in ((2, True), (3, True), (4, False)):
        conv(f"conv{i}", False)
        bn(f"bn{i}")
        layers.append({"kind": "relu", "name": f"relu{i}"})
        if pool:
            layers.append({"kind": "maxpool", "name": f"pool{i}", "kernel": 2, "stride": 2})
    layers.append({
        "kind": "fc", "name": "fc", "shape": list(model.fc.weight.shape), "nbsmt_exempt": True,
        "blob": {"weight": write_blob(out_dir, "fc.weight.bin", model.fc.weight),
                 "bias": write_blob(out_dir, "fc.bias.bin", model.fc.bias)},
    })
    manifest = {
        "version": 1, "arch": "deskcnn", "input_shape": [1, 28, 28], "num_classes": 10,
        "input_norm": {"mean": [MEAN], "std": [STD]}, "layers": layers, "metadata": metadata,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="fixtures/mnist")
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--prune-iters", type=int, default=4)
    ap.add_argument("--prune-step", type=float, default=0.10)
    ap.add_argument("--widths", default="16,32,32,32", help="conv1..conv4 output channels")
    ap.add_argument("--name", default="deskcnn_mnist")
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    gen = torch.Generator().manual_seed(args.seed)
    xtr, ytr = load_split(args.data, "train")
    xte, yte = load_split(args.data, "t10k")

    widths = tuple(int(v) for v in args.widths.split(","))
    model = DeskCNN(widths)
    print("training dense DeskCNN", flush=True)
    train_epochs(model, xtr, ytr, args.epochs, 3e-3, gen)
    dense_acc = evaluate(model, xte, yte)
    print(f"dense fp32 top1 {dense_acc:.4f}", flush=True)
    export(model, os.path.join(args.out, args.name),
           {"trainer": "train_deskcnn.py", "seed": args.seed, "epochs": args.epochs, "widths": list(widths),
            "fp32_top1": dense_acc})

    masks = None
    for it in range(1, args.prune_iters + 1):
        target = min(args.prune_step * it, 0.99)
        masks = magnitude_masks(model, target)
        with torch.no_grad():
            for name, m in masks.items():
                getattr(model, name).weight.mul_(m)
        print(f"prune iter {it}: sparsity {target:.2f}", flush=True)
        train_epochs(model, xtr, ytr, 1, 1e-3, gen, masks)
    sparsity = {n: float((getattr(model, n).weight == 0).float().mean()) for n in ELIGIBLE}
    pruned_acc = evaluate(model, xte, yte)
    print(f"pruned fp32 top1 {pruned_acc:.4f} sparsity {sparsity}", flush=True)
    export(model, os.path.join(args.out, args.name + "_p40"),
           {"trainer": "train_deskcnn.py", "seed": args.seed, "fp32_top1": pruned_acc,
            "prune_schedule": f"{args.prune_iters}x(+{args.prune_step:.2f}, finetune 1 epoch)",
            "sparsity": sparsity})


if __name__ == "__main__":
    main()
