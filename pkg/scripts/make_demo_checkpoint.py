#!/usr/bin/env python3
"""Build a small dataset + checkpoint + config for demos and UI tests.

Usage: python3 scripts/make_demo_checkpoint.py <out_dir> [--full]

The default configuration is deliberately tiny (one template, a few
episodes, two epochs) so the artifact builds in seconds; --full uses the
shipped desk-scale configuration instead.
"""

import json
import sys
from pathlib import Path

from affordkit import harness as hz
from affordkit import policy as pol


def tiny_config():
    cfg = hz.default_config()
    cfg["data"]["templates"] = ["walk_to", "pick_place"]
    cfg["data"]["episodes_per_template"] = 4
    cfg["data"]["n_grounded_points"] = 64
    cfg["data"]["n_current_points"] = 64
    cfg["policy"] = pol.PolicyConfig(
        n_grounded_points=64, n_current_points=64, point_hidden=16,
        point_out=16, fusion_out=16, denoiser_hidden=32).to_meta()
    cfg["train"].update(epochs=2, batch_size=8)
    cfg["eval"].update(seeds_per_task=2, max_steps=24)
    cfg["tune"].update(steps=5, n_demos=2)
    return hz.validate_config(cfg)


def main():
    args = [a for a in sys.argv[1:] if not a.startswith("--")]
    if len(args) != 1:
        print(__doc__, file=sys.stderr)
        return 2
    out = Path(args[0])
    out.mkdir(parents=True, exist_ok=True)
    cfg = hz.default_config() if "--full" in sys.argv else tiny_config()
    with open(out / "config.json", "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)
    hz.gen_data(cfg, 0, out / "dataset")
    hz.run_training(out / "dataset", cfg, out / "policy.ckpt")
    print(out / "policy.ckpt")
    return 0


if __name__ == "__main__":
    sys.exit(main())
