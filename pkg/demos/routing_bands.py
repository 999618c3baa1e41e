"""Where each scheme runs compression and decompression as the device warms up."""

from ccsdsim.device import Origin
from ccsdsim.scheduler import PolicyConfig, Scheme, route_compression, route_decompression

TEMPS = (40.0, 75.0, 76.0, 80.0, 84.0, 85.0, 86.0)


def main() -> None:
    print(f"{'scheme':<9} " + " ".join(f"{t:>9.0f}" for t in TEMPS))
    for scheme in Scheme:
        p = PolicyConfig(scheme=scheme)
        cells = []
        for t in TEMPS:
            c = route_compression(t, p).value[0].upper()
            d = route_decompression(t, p, Origin.DEVICE).value[0].upper()
            cells.append(f"{'c=' + c + ' d=' + d:>9}")
        print(f"{scheme.value:<9} " + " ".join(cells))
    print("c: compression, d: decompression of device-compressed data; D device, H host, S skipped")


if __name__ == "__main__":
    main()
