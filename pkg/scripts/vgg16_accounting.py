"""Print channel and parameter counts of the VGG16-like backbone."""
import argparse

import numpy as np

from chanscale import netgraph as ng


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--size", type=int, default=512, help="input height and width")
    args = p.parse_args()
    model = ng.build_vgg16_like(input_shape=(args.size, args.size, 3), seed=0, dtype=np.float32)
    counts = ng.count_parameters(model)
    augmented = ng.count_parameters(ng.attach_scaling(model))
    print(f"conv channels per layer: {list(ng.count_channels(model))}")
    print(f"total conv channels:     {sum(ng.count_channels(model))}")
    print(f"total parameters:        {counts['total']} ({counts['total'] / 1e6:.2f}M)")
    print(f"trainable (baseline):    {counts['trainable']}")
    print(f"trainable (with scaling): {augmented['trainable']}")


if __name__ == "__main__":
    main()
