import json
import logging
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
logger.addHandler(logging.StreamHandler(sys.stderr))

THREADS_ENV_VAR = "FEDFED_THREADS"


def get_default_thread_count():
    return 1


def get_thread_count():
    """
    returns the size of the client worker pool, capped by FEDFED_THREADS.
    Invalid values fall back to the default with a warning
    """
    default_threads = get_default_thread_count()
    raw = os.getenv(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return default_threads
    try:
        threads = int(raw)
    except ValueError:
        logger.warning(
            f"Unable to parse {THREADS_ENV_VAR}={raw!r}. Using default thread count: {default_threads}"
        )
        return default_threads
    if threads < 1:
        logger.warning(
            f"{THREADS_ENV_VAR} must be >= 1, got {threads}. Using default thread count: {default_threads}"
        )
        return default_threads
    return threads


def rng_stream(seed, purpose, *keys):
    """
    Independent, reproducible random stream for (seed, purpose, keys...).
    e.g. rng_stream(7, "local", client_id, round) gives every client its own stream per round,
    independent of the order in which clients are scheduled.
    :param int seed: experiment seed
    :param str purpose: name of the consumer of the stream
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode("utf-8"))]
    entropy.extend(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def read_json_document(path):
    """
    Reads a JSON object from path. A blank file is an empty document
    """
    with open(path, "r") as f:
        text = f.read()
    if text.strip() == "":
        return {}
    return json.loads(text)


def write_json_document(document, path):
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")


def to_json_line(row):
    return json.dumps(row, sort_keys=True, separators=(",", ":"))


def write_jsonl(rows, path):
    with open(path, "w") as f:
        for row in rows:
            f.write(to_json_line(row) + "\n")


def map_in_order(fn, items):
    """
    Applies fn to every item, on a thread pool sized by FEDFED_THREADS. Results keep the order of items
    """
    items = list(items)
    threads = min(get_thread_count(), max(1, len(items)))
    if threads == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
