"""Atomic CSV/text output with a versioned schema header."""
import csv
import io
import os
import tempfile

__all__ = ["atomic_write_text", "write_csv", "read_csv"]


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` through a temp file and ``os.replace``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, schema, columns, rows):
    """Atomically write a CSV whose first line is ``# schema: <schema>``.

    Floats use ``repr`` so the file round-trips bit for bit.
    """
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path):
    """Return ``(schema, columns, rows)`` with numeric cells parsed as float."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        schema = first.split(":", 1)[1].strip() if first.startswith("# schema:") else None
        reader = csv.reader(fh)
        columns = next(reader)
        rows = []
        for row in reader:
            parsed = []
            for cell in row:
                try:
                    parsed.append(float(cell))
                except ValueError:
                    parsed.append(cell)
            rows.append(parsed)
    return schema, columns, rows
