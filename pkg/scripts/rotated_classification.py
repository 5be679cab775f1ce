"""Compare a classifier on invariant signatures with one on raw codes, on rotated glyphs.

    python3 scripts/rotated_classification.py [--epochs 40] [--out runs/rotclass]
"""
import argparse
import json
from dataclasses import fields
from pathlib import Path

from ftl.experiments import RotClassSettings, rotated_classification


def _flag_type(default):
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes")
    return type(default)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(RotClassSettings):
        parser.add_argument(f"--{f.name.replace('_', '-')}", type=_flag_type(f.default), default=f.default)
    parser.add_argument("--out", default="runs/rotclass")
    args = vars(parser.parse_args())
    out = Path(args.pop("out"))
    r = rotated_classification(RotClassSettings(**args))
    summary = {name: {"test": r[name]["test"], "train_error": r[name]["train_error"]}
               for name in ("signature", "code")}
    summary["error_gap"] = r["code"]["test"]["error"] - r["signature"]["test"]["error"]
    summary["seconds"] = r["seconds"]
    summary["settings"] = r["settings"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"signature error {r['signature']['test']['error']:.4f}  "
          f"code error {r['code']['test']['error']:.4f}  gap {summary['error_gap']:+.4f}")


if __name__ == "__main__":
    main()
