"""Small builders shared by the test modules."""
import numpy as np

from curvecast.market_data import (
    MicropriceSeries,
    SyntheticMarketConfig,
    build_microprice_series,
    generate_synthetic_market,
    merge_streams,
)
from curvecast.sampling import align_and_downsample, build_windows, make_dataset

DAY0 = 1_514_851_200_000_000_000  # 2018-01-02 00:00 UTC in ns
NS_DAY = 86_400_000_000_000


def series_from(paths: dict[int, list[tuple[int, float]]]) -> dict[int, MicropriceSeries]:
    return {
        c: MicropriceSeries(c, np.array([t for t, _ in pts], dtype=np.int64),
                            np.array([p for _, p in pts], dtype=np.float64))
        for c, pts in paths.items()
    }


def synthetic_series(**kw):
    cfg = SyntheticMarketConfig(**kw)
    series, _ = build_microprice_series(merge_streams(generate_synthetic_market(cfg)), cfg.contracts)
    return series


def synthetic_dataset(window=20, **kw):
    curve = align_and_downsample(synthetic_series(**kw))
    return make_dataset(build_windows(curve, window))


def finite_difference_check(params, X, Y, masks=None, h=1e-5):
    """Relative errors between analytic and central-difference gradients, one per parameter."""
    from curvecast.density import loss_and_grad

    _, grads = loss_and_grad(params, X, Y, masks)
    rel = []
    for name, arr in params.arrays.items():
        g = grads[name]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up, _ = loss_and_grad(params, X, Y, masks)
            flat[i] = old - h
            dn, _ = loss_and_grad(params, X, Y, masks)
            flat[i] = old
            fd = (up - dn) / (2 * h)
            an = g.reshape(-1)[i]
            rel.append(abs(fd - an) / max(abs(fd), abs(an), 1e-7))
    return np.array(rel)


def dense_mvn_logpdf(y, mu, L):
    """log N(y; mu, inv(L L^T)) evaluated with dense linear algebra."""
    import scipy.stats

    cov = np.linalg.inv(L @ L.T)
    return scipy.stats.multivariate_normal(mean=mu, cov=cov).logpdf(y)
