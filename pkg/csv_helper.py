import csv
import io
import json
import os
from typing import IO, Iterable, Iterator, List, Sequence, Tuple, Type, Union

from errors import IngestError

UTF8_BOM = b'\xef\xbb\xbf'


def _text_stream(stream: Union[IO[bytes], IO[str], bytes], error_cls: Type[IngestError]) -> IO[str]:
    if isinstance(stream, io.TextIOBase):
        return stream
    raw = bytes(stream) if isinstance(stream, (bytes, bytearray)) else stream.read()
    if raw.startswith(UTF8_BOM):
        raw = raw[len(UTF8_BOM):]
    try:
        text = raw.decode('utf-8')
    except UnicodeDecodeError as e:
        raise error_cls(f"invalid UTF-8 byte 0x{raw[e.start]:02x} at offset {e.start}",
                        line=raw.count(b'\n', 0, e.start) + 1)
    return io.StringIO(text, newline='')


def iter_csv_rows(stream, expected_header: Sequence[str],
                  error_cls: Type[IngestError] = IngestError) -> Iterator[Tuple[int, dict]]:
    """
    Yields (line_number, row_dict) for every data row of a CSV stream.

    :param stream: Binary or text stream (or raw bytes) holding UTF-8 CSV.
    :param expected_header: Column names the header row must start with.
    :param error_cls: Raised for undecodable bytes and header mismatches.
    """
    reader = csv.DictReader(_text_stream(stream, error_cls))
    if reader.fieldnames is None:
        return
    header = [h.strip() for h in reader.fieldnames]
    if header[:len(expected_header)] != list(expected_header):
        raise error_cls(
            f"expected header {','.join(expected_header)}, got {','.join(header)}", line=1)
    reader.fieldnames = header
    for row in reader:
        if not any((v or '').strip() for k, v in row.items() if k is not None):
            continue
        yield reader.line_num, row


def write_csv(file_path, data: Iterable[dict], fieldnames: List[str]):
    """
    Writes a list of dictionaries to a CSV file.

    :param file_path: Path to the CSV file.
    :param data: Rows to write.
    :param fieldnames: List of field names for the CSV file.
    """
    ensure_parent(file_path)
    with open(file_path, mode='w', newline='', encoding='utf-8') as csvfile:
        writer = csv.DictWriter(csvfile, fieldnames=fieldnames, lineterminator='\n')
        writer.writeheader()
        writer.writerows(data)


def read_jsonl(file_path) -> List[dict]:
    with open(file_path, mode='r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def write_jsonl(file_path, records: Iterable[dict]):
    ensure_parent(file_path)
    with open(file_path, mode='w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=False, separators=(',', ':')))
            f.write('\n')


def ensure_parent(file_path):
    parent = os.path.dirname(os.path.abspath(file_path))
    os.makedirs(parent, exist_ok=True)
