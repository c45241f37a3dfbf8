#!/usr/bin/env python3
"""Demo script: a tiny proposed-vs-random comparison on one seed."""

import asyncio
from pathlib import Path

from massive_access.config import load_settings
from massive_access.harness import ExperimentRunner
from massive_access.metrics import read_csv
from massive_access.models import Approach, ExperimentSpec


async def demo():
    """Run a small demo of the experiment runner."""
    print("🚀 Starting massive-access demo")

    output_dir = Path("demo_output")
    settings = load_settings(
        overrides={
            "scenario.num_cdevices": 4,
            "scenario.num_d2d_pairs": 2,
            "scenario.num_subchannels": 4,
            "train.steps_per_episode": 20,
            "train.batch_size": 8,
            "train.replay_capacity": 500,
            "train.hidden_layers": [16, 16],
            "transfer.group_size": 3,
        }
    )
    spec = ExperimentSpec(
        approaches=[Approach.PROPOSED, Approach.RANDOM],
        episodes=30,
        slots=200,
        window=50,
    )
    runner = ExperimentRunner(spec, settings, output_dir, max_concurrent=2)

    try:
        print("📡 Training and evaluating 2 cells...")
        aggregate = await runner.run()

        print("📊 Evaluation windows (mean EE / success):")
        for row in read_csv(aggregate):
            if row["phase"] == "eval":
                ee = float(row["mean_ee_mean"])
                success = float(row["success_mean"])
                print(
                    f"  {row['approach']:>10} window {row['index']}: "
                    f"{ee:.2f} / {success:.3f}"
                )

        print(f"\n📁 Output saved to: {output_dir}")
        print("  - cells/*.csv: per-cell training and evaluation rows")
        print("  - events/*.csv: transfer and cooperation events")
        print("  - aggregate.csv: across-seed means")

    except KeyboardInterrupt:
        print("\n⏹️  Demo interrupted")
    except Exception as e:
        print(f"❌ Error: {str(e)}")


if __name__ == "__main__":
    asyncio.run(demo())
