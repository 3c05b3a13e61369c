import copy
import json
import traceback

from magnum_opus.operarius import LoggerWrapper, TaskProcessor, KeyValueStore, Task, StatePersistence

from opus_vicinia.experiment import ComparisonException, SplitException, TrainConfigException
from opus_vicinia.feature_extraction import LabelFileException, RasterExtentException
from opus_vicinia.grid_core import CellRecordException, FeatureTableParseException, GridBoundsException, InvalidGridException
from opus_vicinia.hooks.kvs_hook import analyse_data
from opus_vicinia.manifest import ManifestException
from opus_vicinia.models import CheckpointException, UnknownModelException
from opus_vicinia.rasters import BandManifestException, RasterFormatException, RasterGeometryException
from opus_vicinia.reporting import ReportException
from opus_vicinia.streets import StreetNetworkException
from opus_vicinia.synthetic import SynthConfigException


EXIT_SUCCESS = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class SpecFieldException(Exception):
    pass


# Problems with what the caller supplied, as opposed to failures while running
INPUT_EXCEPTIONS = (
    SpecFieldException,
    InvalidGridException,
    GridBoundsException,
    CellRecordException,
    FeatureTableParseException,
    RasterFormatException,
    RasterGeometryException,
    BandManifestException,
    RasterExtentException,
    LabelFileException,
    StreetNetworkException,
    SynthConfigException,
    TrainConfigException,
    SplitException,
    ComparisonException,
    UnknownModelException,
    CheckpointException,
    ReportException,
    ManifestException,
    FileNotFoundError,
)


class PipelineTaskProcessor(TaskProcessor):
    """Common processing flow of the opus-vicinia task processors.

    Subclasses implement `run()`, which returns a dict of result names to values. Every
    result is stored in the key value store as `<kind>:<task_id>:<command>:<context>:<NAME>`
    together with `EXIT_CODE` (0 unless `run()` sets it) and `ERROR`.

    Errors are not raised unless the spec sets `raiseExceptionOnError` to `True`. Instead
    input problems store `EXIT_CODE` 2 and every other failure stores `EXIT_CODE` 1, with
    the message in `ERROR`.
    """

    def __init__(self, kind: str='Pipeline', kind_versions: list=['v1',], supported_commands: list=list(), logger: LoggerWrapper=LoggerWrapper()):
        self.spec = dict()
        self.metadata = dict()
        super().__init__(kind, kind_versions, supported_commands, logger)

    def spec_value(self, name: str, default: object=None, required: bool=False)->object:
        """Look up a spec field by its camelCase name, ignoring case."""
        for key, value in self.spec.items():
            if isinstance(key, str) and key.lower() == name.lower():
                return value
        if required is True:
            raise SpecFieldException('spec field "{}" is required'.format(name))
        return default

    def spec_int(self, name: str, default: int=None, required: bool=False)->int:
        value = self.spec_value(name=name, default=default, required=required)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise SpecFieldException('spec field "{}" must be an integer, got {}'.format(name, value))
        try:
            converted = int(value)
        except ValueError:
            raise SpecFieldException('spec field "{}" must be an integer, got "{}"'.format(name, value))
        if isinstance(value, float) and converted != value:
            raise SpecFieldException('spec field "{}" must be an integer, got {}'.format(name, value))
        return converted

    def spec_float(self, name: str, default: float=None, required: bool=False)->float:
        value = self.spec_value(name=name, default=default, required=required)
        if value is None:
            return None
        if isinstance(value, bool):
            raise SpecFieldException('spec field "{}" must be a number, got {}'.format(name, value))
        try:
            return float(value)
        except (TypeError, ValueError):
            raise SpecFieldException('spec field "{}" must be a number, got "{}"'.format(name, value))

    def spec_bool(self, name: str, default: bool=False)->bool:
        value = self.spec_value(name=name, default=default)
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lower() in ('true', 'yes', '1', 'false', 'no', '0',):
            return value.strip().lower() in ('true', 'yes', '1',)
        raise SpecFieldException('spec field "{}" must be a boolean, got {}'.format(name, value))

    def result_key(self, task: Task, command: str, context: str, name: str)->str:
        return '{}:{}:{}:{}:{}'.format(task.kind, task.task_id, command, context, name)

    def run(self, task: Task, command: str, context: str, log_header: str)->dict:
        raise NotImplementedError('{} does not implement run()'.format(self.__class__.__name__))

    def _raise_on_error(self, task: Task)->bool:
        for key, value in task.spec.items():
            if isinstance(key, str) and key.lower() == 'raiseexceptiononerror':
                return value is True
        return False

    def process_task(self, task: Task, command: str, context: str='default', key_value_store: KeyValueStore=KeyValueStore(), state_persistence: StatePersistence=StatePersistence())->KeyValueStore:
        new_key_value_store = KeyValueStore()
        new_key_value_store.store = copy.deepcopy(key_value_store.store)
        log_header = self.format_log_header(task=task, command=command, context=context)
        self.log(message='PROCESSING START', build_log_message_header=False, level='info', header=log_header)

        results = dict()
        error_message = None
        exit_code = EXIT_SUCCESS
        processing_exception = None
        try:
            self.spec = analyse_data(
                data=copy.deepcopy(task.spec),
                key_value_store=key_value_store,
                command=command,
                context=context,
                task_id=task.task_id,
                logger=self.logger,
                hook_name=self.kind,
            )
            self.metadata = copy.deepcopy(task.metadata)
            self.log(message='   spec: {}'.format(json.dumps(self.spec, default=str)), build_log_message_header=False, level='debug', header=log_header)
            results = self.run(task=task, command=command, context=context, log_header=log_header)
            exit_code = int(results.pop('EXIT_CODE', EXIT_SUCCESS))
            error_message = results.pop('ERROR', None)
        except INPUT_EXCEPTIONS as e:
            processing_exception = e
            exit_code = EXIT_USAGE
            error_message = '{}: {}'.format(type(e).__name__, e)
            self.log(message='INPUT ERROR: {}'.format(error_message), build_log_message_header=False, level='error', header=log_header)
        except Exception as e:
            processing_exception = e
            exit_code = EXIT_FAILURE
            error_message = '{}: {}'.format(type(e).__name__, e)
            self.log(message='EXCEPTION: {}'.format(traceback.format_exc()), build_log_message_header=False, level='error', header=log_header)

        self.spec = dict()
        self.metadata = dict()

        if exit_code != EXIT_SUCCESS and self._raise_on_error(task=task) is True:
            if processing_exception is not None:
                raise processing_exception
            raise Exception('{} - Task Processing failed with exit code {}: {}'.format(log_header, exit_code, error_message))

        for name, value in results.items():
            new_key_value_store.save(key=self.result_key(task=task, command=command, context=context, name=name), value=value)
        new_key_value_store.save(key=self.result_key(task=task, command=command, context=context, name='EXIT_CODE'), value=exit_code)
        new_key_value_store.save(key=self.result_key(task=task, command=command, context=context, name='ERROR'), value=error_message)

        self.log(message='DONE (exit code {})'.format(exit_code), build_log_message_header=False, level='info', header=log_header)
        return new_key_value_store
