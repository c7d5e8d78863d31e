import os
import tempfile
from contextlib import contextmanager


@contextmanager
def atomic_output(path, mode='w', encoding='utf-8'):
    """
    Open a temporary file next to ``path`` and move it into place on success.

    If the block raises, the temporary file is removed and ``path`` is left
    untouched.

    Args:
        path (str | os.PathLike): Final destination
        mode (str): 'w' for text, 'wb' for bytes

    Yields:
        file: Writable file object
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    try:
        if 'b' in mode:
            handle = os.fdopen(fd, mode)
        else:
            handle = os.fdopen(fd, mode, encoding=encoding, newline='')
        with handle:
            yield handle
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


@contextmanager
def staged_outputs(paths):
    """
    Reserve one temporary path beside each destination.

    The caller writes and checks the temporary files inside the block. Only
    when the block finishes are all of them moved onto their destinations;
    if it raises, every temporary file is removed and no destination changes.

    Args:
        paths (Iterable[str | os.PathLike]): Final destinations

    Yields:
        list: Temporary paths, in the order of ``paths``
    """
    paths = [os.fspath(p) for p in paths]
    staged = []
    try:
        for path in paths:
            directory = os.path.dirname(os.path.abspath(path))
            os.makedirs(directory, exist_ok=True)
            fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', suffix=os.path.splitext(path)[1], dir=directory)
            os.close(fd)
            staged.append(tmp_path)
        yield staged
        for tmp_path, path in zip(staged, paths):
            os.replace(tmp_path, path)
    except BaseException:
        for tmp_path in staged:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
        raise
