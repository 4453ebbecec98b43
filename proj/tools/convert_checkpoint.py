#!/usr/bin/env python3
"""Export an open_clip model to a float32 safetensors file the C++ loader reads."""

import argparse

import open_clip
import torch
from safetensors.torch import save_file


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="ViT-B-32", help="open_clip architecture name")
    ap.add_argument("--pretrained", default="openai", help="open_clip pretrained tag or checkpoint path")
    ap.add_argument("--out", required=True, help="output .safetensors path")
    args = ap.parse_args()

    model, _, _ = open_clip.create_model_and_transforms(args.model, pretrained=args.pretrained)
    state = {k: v.detach().to(torch.float32).contiguous() for k, v in model.state_dict().items()
             if k != "logit_scale" and k != "attn_mask" and torch.is_floating_point(v)}
    save_file(state, args.out)
    print(f"wrote {len(state)} tensors to {args.out}")


if __name__ == "__main__":
    main()
