import numpy as np

from dcssl.data import CIFAR_RECORD_BYTES, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES


def encode_cifar_records(labels, planes) -> bytes:
    """Assemble raw CIFAR-10 binary records from label bytes and channel planes.

    `planes` has shape (n, 3, 32, 32) uint8 (channel-plane order, as stored on
    disk). Kept deliberately simple and separate from the package reader so the
    two sides of the format round-trip independently.
    """
    labels = np.asarray(labels, dtype=np.uint8)
    planes = np.asarray(planes, dtype=np.uint8)
    n = len(labels)
    records = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = planes.reshape(n, 3072)
    return records.tobytes()


def write_synthetic_cifar_dir(directory, per_train_file=40, test_records=100, seed=0):
    """Materialize a miniature dataset in the exact CIFAR-10 binary layout."""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)

    def random_batch(count, sub):
        labels = sub.integers(0, 10, count).astype(np.uint8)
        planes = sub.integers(0, 256, size=(count, 3, 32, 32)).astype(np.uint8)
        # weak class-dependent tint so the labels are learnable
        planes = np.clip(planes.astype(np.int64) + 8 * labels[:, None, None, None], 0, 255)
        return labels, planes.astype(np.uint8)

    for name in CIFAR_TRAIN_FILES:
        labels, planes = random_batch(per_train_file, rng)
        (directory / name).write_bytes(encode_cifar_records(labels, planes))
    labels, planes = random_batch(test_records, rng)
    (directory / CIFAR_TEST_FILE).write_bytes(encode_cifar_records(labels, planes))
    return directory
