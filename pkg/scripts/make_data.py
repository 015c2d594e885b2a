"""Regenerate the bundled experiment configs and example files in src/tlsf/data."""
import csv
import json
import sys
from pathlib import Path

from tlsf.harness import BUILDERS, EXAMPLE_S1, EXAMPLE_S2, EXAMPLE_SPEC, example_signal, synthetic_demo


def main(argv=None) -> int:
    out = Path(argv[0]) if argv else Path(__file__).resolve().parents[1] / "src" / "tlsf" / "data"
    out.mkdir(parents=True, exist_ok=True)
    for name, build in BUILDERS.items():
        build().save(out / f"{name}.json")
    (out / "example_spec.json").write_text(json.dumps(EXAMPLE_SPEC, indent=2) + "\n")
    example_signal(EXAMPLE_S1).to_csv(out / "example_s1.csv")
    example_signal(EXAMPLE_S2).to_csv(out / "example_s2.csv")
    t, P = synthetic_demo()
    with open(out / "reach_demo.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z"])
        for ti, p in zip(t, P):
            w.writerow([repr(float(ti))] + [repr(float(v)) for v in p])
    print(f"wrote bundled data to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
