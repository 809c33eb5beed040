import numpy as np
import pytest

from ssmprune.io import CIFAR_RECORD_BYTES


def write_cifar_files(root, n_train, n_test, seed=0, n_batches=1, difficulty=0.55):
    """Write a synthetic 10-class dataset in the CIFAR-10 binary layout.

    Each class gets a fixed low-frequency template; samples are noisy,
    brightness-jittered, randomly shifted draws from their template, so a
    small conv net can learn the task without it being trivial. Returns
    (train file names, test file names).
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    templates = np.zeros((10, 3, 32, 32))
    for c in range(10):
        for ch in range(3):
            field = np.zeros((32, 32))
            for _ in range(3):
                fy, fx = rng.uniform(0.5, 3.0, size=2)
                phase_y, phase_x = rng.uniform(0, 2 * np.pi, size=2)
                field += rng.uniform(0.5, 1.0) * np.cos(
                    2 * np.pi * fy * yy / 32 + phase_y
                ) * np.cos(2 * np.pi * fx * xx / 32 + phase_x)
            field -= field.min()
            field /= field.max()
            templates[c, ch] = field

    def make_split(n, file_names):
        labels = rng.integers(0, 10, size=n)
        shifts = rng.integers(-3, 4, size=(n, 2))
        bright = rng.uniform(0.7, 1.0, size=(n, 1, 1, 1))
        noise = rng.normal(0.0, 1.0 - difficulty, size=(n, 3, 32, 32))
        imgs = templates[labels] * bright
        for i in range(n):
            imgs[i] = np.roll(imgs[i], tuple(shifts[i]), axis=(1, 2))
        imgs = np.clip(difficulty * imgs + (1.0 - difficulty) * 0.5 + 0.25 * noise, 0, 1)
        pix = (imgs * 255).astype(np.uint8).reshape(n, 3072)
        per_file = n // len(file_names)
        for fi, name in enumerate(file_names):
            sl = slice(fi * per_file, (fi + 1) * per_file if fi < len(file_names) - 1 else n)
            rec = np.concatenate(
                [labels[sl, None].astype(np.uint8), pix[sl]], axis=1
            )
            assert rec.shape[1] == CIFAR_RECORD_BYTES
            (root / name).write_bytes(rec.tobytes())
        return file_names

    train_names = [f"data_batch_{i}.bin" for i in range(1, n_batches + 1)]
    test_names = ["test_batch.bin"]
    make_split(n_train, train_names)
    make_split(n_test, test_names)
    return train_names, test_names


@pytest.fixture(scope="session")
def small_cifar_dir(tmp_path_factory):
    """A 2000/400-example synthetic dataset shared by the fast tests."""
    root = tmp_path_factory.mktemp("cifar_small")
    write_cifar_files(root, 2000, 400, seed=7, n_batches=5)
    return root
