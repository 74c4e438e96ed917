"""
A small lighting-change study
=============================

The harness pairs every terrain with every sun change: 0 h (the mapping
sun), 3 h and 6 h. For each cell it runs a few trials from perturbed
guesses and folds them into one table row. This is a shrunken version of
the full study (`vtsm experiment` with the default config), small enough to
finish in a few minutes.

Results, the CSV table and the scatter plot land in demos/out/grid/.
"""
from pathlib import Path

from vtsm.harness import ExperimentConfig, cells_csv, report_tables, run_experiment

out = Path(__file__).parent / "out" / "grid"

terrain = {"extent": 4.0, "texture_size": 1024, "seed": 2}
cfg = ExperimentConfig(
    name="demo-grid",
    terrains=({"kind": "flagstone", **terrain}, {"kind": "cfa6", **terrain}),
    time_differences=("0h", "6h"),
    trials=3,
    ring_count=3, ring_radius=1.6, ring_height=1.3,
    vtsm={"n_correspondences": 40, "template_size": 64, "min_inliers": 12},
)

# finished trials are picked up again if the script is rerun
cells = run_experiment(cfg, out, log=print)
print()
print(cells_csv(cells))
csv_path, svg_path = report_tables(cells, out / "tables")
print("wrote", csv_path, "and", svg_path)
