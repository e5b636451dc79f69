#!/usr/bin/env python3
"""Warm-starting the simulator from predicted pools.

Trains a surrogate, has it predict the slow pools for every cell, writes
those predictions into a restart file, and lets the simulator continue
from there. The report compares the distance to true equilibrium before
and after a short continuation run, the drift it would add, and the
speedup over a cold start.
"""

import os
import tempfile

from phase_surrogate import pipeline, simulator, training
from phase_surrogate.heads import denormalize, write_restart_state
from phase_surrogate.model import Surrogate


def main():
    world = simulator.generate_world(seed=0,
                                     grid=simulator.grid_spec("coarse"),
                                     years=6)
    records = simulator.export_samples(world)
    with tempfile.TemporaryDirectory() as tmp:
        dataset = pipeline.build_dataset(records, seed=0,
                                         out_dir=os.path.join(tmp, "ds"))
        model = training.train(training.TrainConfig(seed=0, max_epochs=40),
                               dataset)

        # predict every cell and write the restart file
        arrays, _, meta = pipeline.stack_records(records)
        groups = pipeline.normalize_groups(arrays, model.feature_stats)
        preds, _ = model.forward(groups)
        physical = denormalize(preds, model.target_stats)
        slow = {t: physical[t] for t in pipeline.SLOW_TASKS}
        path = os.path.join(tmp, "warm.phr")
        write_restart_state(slow, meta["cell_id"], world.n_pft,
                            world.n_layers, path,
                            expected_ids=world.land_idx)
        print(f"wrote {os.path.basename(path)} for {world.n_cells} cells")

        initial, _ = simulator.load_restart_state(world, path)
        _, report = simulator.restart_run(initial, world, years=100)

        print(f"\n{'pool':>12} {'before':>10} {'after':>10} {'drift':>10}"
              f"   (median relative distance to equilibrium)")
        for pool in simulator.SLOW_POOLS:
            print(f"{pool:>12} {report.before[pool]['median']:>10.4f} "
                  f"{report.after[pool]['median']:>10.4f} "
                  f"{report.drift[pool]['median']:>10.4f}")
        print(f"\ncold start needs >= {report.cold_start_years.min():.0f} yr; "
              f"the window behind this model is {report.window_years} yr")
        print(f"speedup: min {report.speedup_min:.0f}x, "
              f"median {report.speedup_median:.0f}x")


if __name__ == "__main__":
    main()
