#!/usr/bin/env python3
"""Export torchvision's ImageNet DenseNet-121 backbone as a pickled state dict.

The C++ classifier reads the file through `backbone_weights` in the pipeline
config (keys `features.*`, torchvision names).
"""
import argparse

import torch
import torchvision


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", help="destination .pt file")
    parser.add_argument(
        "--no-pretrained",
        action="store_true",
        help="random weights (no download); only useful to test the loader",
    )
    args = parser.parse_args()

    weights = None if args.no_pretrained else torchvision.models.DenseNet121_Weights.IMAGENET1K_V1
    model = torchvision.models.densenet121(weights=weights)
    state = {k: v.detach().clone() for k, v in model.state_dict().items() if k.startswith("features.")}
    torch.save(state, args.out)
    print(f"wrote {len(state)} tensors to {args.out}")


if __name__ == "__main__":
    main()
