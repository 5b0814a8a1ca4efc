"""Regenerate data/toy.csv and data/toy_schema.json (200 simulated subjects)."""

import json
from pathlib import Path

from longicausal.dataset import write_wide_csv
from longicausal.simulation import DgpSpec, gen_dataset

ROOT = Path(__file__).resolve().parents[1]


def main():
    ds = gen_dataset(DgpSpec(n=200, p=10), seed=2024).dataset
    schema = write_wide_csv(ds, ROOT / "data" / "toy.csv")
    with open(ROOT / "data" / "toy_schema.json", "w", encoding="utf-8") as fh:
        json.dump(schema, fh, indent=1)
        fh.write("\n")


if __name__ == "__main__":
    main()
