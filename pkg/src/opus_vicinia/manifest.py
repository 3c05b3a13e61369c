import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional

from opus_adstator.file_io import calculate_file_checksum, get_file_size

from magnum_opus.operarius import LoggerWrapper
from opus_vicinia import CHECKPOINT_FORMAT_VERSION, FEATURE_TABLE_FORMAT_VERSION, REPORT_FORMAT_VERSION, __version__
from opus_vicinia.reporting import write_json


MANIFEST_SUFFIX = '.manifest.json'


class ManifestException(Exception):
    pass


def manifest_path(primary_output: str)->str:
    return '{}{}'.format(primary_output, MANIFEST_SUFFIX)


def describe_input(path: str)->Dict[str, object]:
    if os.path.isfile(path) is False:
        raise ManifestException('input file "{}" does not exist'.format(path))
    return {
        'path': path,
        'sha256': calculate_file_checksum(file_path=path, checksum_algorithm='sha256'),
        'size': int(get_file_size(file_path=path)),
    }


@dataclass
class RunManifest:
    """What produced a set of outputs: command, resolved config, seeds, input digests and versions."""
    command: str
    config: dict
    seeds: Dict[str, int] = field(default_factory=dict)
    inputs: List[dict] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    tool_version: str = __version__
    format_versions: Dict[str, str] = field(default_factory=lambda: {
        'feature_table': FEATURE_TABLE_FORMAT_VERSION,
        'checkpoint': CHECKPOINT_FORMAT_VERSION,
        'report': REPORT_FORMAT_VERSION,
    })
    created: Optional[str] = None

    def add_input(self, path: str):
        self.inputs.append(describe_input(path=path))

    def add_output(self, path: str):
        if path not in self.outputs:
            self.outputs.append(path)

    def to_dict(self)->dict:
        return asdict(self)


def write_manifest(manifest: RunManifest, primary_output: str, logger: LoggerWrapper=LoggerWrapper())->str:
    """Write `<primary_output>.manifest.json`; the timestamp is the only field that varies between identical runs."""
    manifest.add_output(primary_output)
    manifest.created = datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')
    path = manifest_path(primary_output=primary_output)
    write_json(path=path, data=manifest.to_dict())
    logger.debug('Wrote run manifest {} ({} inputs, {} outputs)'.format(path, len(manifest.inputs), len(manifest.outputs)))
    return path
