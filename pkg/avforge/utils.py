from joblib import Parallel, delayed


def parallel_map(function, items, workers=1):
    """Apply `function` to every item on a thread pool; results keep input order."""
    return Parallel(n_jobs=workers, prefer="threads")(delayed(function)(item) for item in items)


def parallel_imap(function, items, workers=1):
    """
    Like `parallel_map`, but yields results lazily and in input order so the
    caller can consume (and release) them one at a time.
    """
    return Parallel(n_jobs=workers, prefer="threads", return_as="generator")(
        delayed(function)(item) for item in items
    )
