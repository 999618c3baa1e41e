"""Sustained compressed writes: the naive device overheats, the scheduler does not.

Runs the same sequential-write stream under Baseline and Waltzs and prints
the sensor reading once a minute.
"""

from ccsdsim.harness import ExperimentConfig, run
from ccsdsim.workload import SyntheticSpec

DURATION = 900.0


def main() -> None:
    wl = SyntheticSpec("seq-write", duration=DURATION)
    reports = {s: run(ExperimentConfig(scheme=s, workload=wl)) for s in ("Baseline", "Waltzs")}
    print(f"{'t (s)':>6} " + " ".join(f"{s:>10}" for s in reports))
    for i in range(59, int(DURATION), 60):
        cells = []
        for rep in reports.values():
            temps, modes = rep.series["temp"], rep.series["mode"]
            cells.append(f"{temps[i]:>4} {modes[i][:5]:>5}" if i < len(temps) else f"{'-':>10}")
        print(f"{i + 1:>6} " + " ".join(cells))
    for s, rep in reports.items():
        down = "never" if rep.shutdown_time is None else f"at {rep.shutdown_time:.0f} s"
        print(f"{s}: peak {rep.max_temp:.1f} C, shutdown {down}, {rep.mean_throughput / 2**20:.3f} MiB/s")


if __name__ == "__main__":
    main()
