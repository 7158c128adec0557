import numpy as np

from app.workers import configure_pool


def startup(threads: int) -> None:
    # called once per process before the first frame is processed
    configure_pool(threads)
    # sigmoid/exp of extreme logits saturate cleanly; overflow warnings are noise
    np.seterr(over="ignore", under="ignore")
