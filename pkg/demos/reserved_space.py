"""Reserved space grown from compression savings on a nearly full partition.

Runs the oltp profile under Baseline and Waltzs and prints how the extra
reserved space moves and what it does to write amplification.
"""

from ccsdsim.harness import ExperimentConfig, run
from ccsdsim.workload import load_profile

DURATION = 300.0


def main() -> None:
    wl = load_profile("oltp", duration=DURATION)
    base = run(ExperimentConfig(scheme="Baseline", workload=wl))
    waltz = run(ExperimentConfig(scheme="Waltzs", workload=wl))
    rs = waltz.series["rs_extra"]
    for i in range(0, len(rs), 30):
        print(f"t={i + 1:>4}s  extra reserved {rs[i] / 2**20:6.2f} MiB")
    print(f"arbiter: {waltz.osa['expansions']} expansions, {waltz.osa['shrinks']} shrinks")
    for rep in (base, waltz):
        print(f"{rep.scheme:<9} WAF {rep.waf:.3f}  cleaning copies {rep.totals['sc_blocks_copied']}")


if __name__ == "__main__":
    main()
