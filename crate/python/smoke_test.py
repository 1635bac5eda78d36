"""Smoke test for the psf_unmix extension module.

Build it first with `cargo build --release -p psf-unmix-python`; the script
loads target/{release,debug}/libpsf_unmix.so when the module is not
installed.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load():
    try:
        import psf_unmix

        return psf_unmix
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libpsf_unmix.so", "libpsf_unmix.dylib", "psf_unmix.dll"):
            path = ROOT / "target" / profile / name
            if path.exists():
                loader = importlib.machinery.ExtensionFileLoader("psf_unmix", str(path))
                spec = importlib.util.spec_from_loader("psf_unmix", loader)
                module = importlib.util.module_from_spec(spec)
                loader.exec_module(module)
                return module
    sys.exit("psf_unmix extension not found; run `cargo build -p psf-unmix-python` first")


def main():
    pu = load()

    k = pu.KernelFamily.u_laplace(2.0)
    assert k.label == "u-laplace-2"
    assert k.eval(0.1, 0.0) == 1.0
    assert abs(k.area(0.1) - 0.1 * math.sqrt(math.pi)) < 1e-12

    spec = pu.ProblemSpec(k, [[-1.0, -0.2, 0.6], [-0.6, 0.2, 1.0]], 2000)
    assert (spec.n_groups, spec.model_order, spec.n_samples) == (2, 6, 2000)
    assert abs(spec.min_separation - 0.4) < 1e-12

    theta = [0.01, 0.01]
    x = pu.synthesize(spec, theta, [1.0] * 6, snr_db=30.0, seed=1)
    assert len(x) == 2000

    fit = pu.solve(spec, x, [0.0105, 0.0095])
    assert fit["converged"], fit["termination"]
    assert max(abs(a - b) for a, b in zip(fit["theta_hat"], theta)) < 1e-3 * 0.4

    g = pu.gradient(spec, [0.011, 0.009], x)
    h = 1e-9
    fd = (pu.loss(spec, [0.011 + h, 0.009], x) - pu.loss(spec, [0.011 - h, 0.009], x)) / (2 * h)
    assert abs(g[0] - fd) <= 1e-5 * max(abs(fd), 1e-300), (g[0], fd)

    ev = pu.hessian(spec, theta, pu.synthesize(spec, theta, [1.0] * 6))
    assert ev["min_eigenvalue"] >= ev["weyl_lower_bound"] - 1e-12

    mu = pu.coherence(spec, 0.01, 0.01, 0.4)
    assert 0.0 <= mu <= pu.coherence(spec, 0.01, 0.01, 0.0)

    c = pu.theorem_constants(spec, theta)
    assert c["diagonal_convention"] == "mu_a(theta_i, theta_i, 0)"

    crb = pu.crb(spec, theta, [1.0] * 6, 0.01)
    assert crb[0][0] > 0 and abs(crb[0][1] - crb[1][0]) <= 1e-12 * crb[0][0]

    checks = pu.self_checks(seed=3, gramian_instances=20)
    failed = [c["name"] for c in checks if not c["passed"]]
    assert not failed, failed

    rt = pu.libs_round_trip(snr_db=30.0, seed=2)
    assert abs(rt["temperature_k"] - 1e4) <= 100.0
    truth = dict(rt["true_concentrations"])
    for species, value in rt["concentrations"]:
        assert abs(value - truth[species]) <= 0.02, species

    try:
        pu.ProblemSpec(k, [[0.0]], 1)
    except ValueError:
        pass
    else:
        raise AssertionError("one-sample grid accepted")

    print("psf_unmix smoke test passed")


if __name__ == "__main__":
    main()
