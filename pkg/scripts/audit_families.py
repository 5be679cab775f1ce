"""Run the algebraic audit on every built-in family and print a residual table."""
import sys

from ftl.transform import AUDIT_THRESHOLDS, audit_homomorphism, face_family, mnist_family, planar_family, rotation_family

FAMILIES = {
    "mnist": mnist_family,
    "planar-5": lambda: planar_family(5),
    "rotation-15": lambda: rotation_family(15),
    "face": face_family,
}


def main(trials=1000):
    ok = True
    keys = list(AUDIT_THRESHOLDS)
    print(f"{'family':<12} " + " ".join(f"{k:>13}" for k in keys))
    for name, make in FAMILIES.items():
        report = audit_homomorphism(make(), trials, seed=0)
        ok &= report.passed
        print(f"{name:<12} " + " ".join(f"{report.residuals[k]:13.2e}" for k in keys))
    return 0 if ok else 3


if __name__ == "__main__":
    sys.exit(main(int(sys.argv[1]) if len(sys.argv) > 1 else 1000))
