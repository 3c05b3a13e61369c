import sys
import os
from inspect import stack

sys.path.append(os.path.dirname(os.path.realpath(__file__)) + "/../src")
print('sys.path={}'.format(sys.path))

import unittest

from opus_vicinia.hooks.kvs_hook import (
    UnresolvedReferenceException,
    analyse_data,
    is_iterable,
    lookup_value,
    spec_variable_key_value_store_resolver,
)
from magnum_opus.operarius import KeyValueStore, Task, TaskLifecycleStage
from logging_support import TestLogger, dump_key_value_store, print_logger_lines

running_path = os.getcwd()
print('Current Working Path: {}'.format(running_path))


def populated_store()->KeyValueStore:
    key_value_store = KeyValueStore()
    key_value_store.save(key='SyntheticCity:city:apply:default:OUTPUT_FILE', value='/tmp/city.csv')
    key_value_store.save(key='SyntheticCity:city:apply:default:FAVELA_CELLS', value=1290)
    key_value_store.save(key='SpatialCrossValidation:crossval-gcn:apply:default:GLOBAL_KAPPA', value=0.5)
    key_value_store.save(key='SyntheticCity:city:apply:other:OUTPUT_FILE', value='/tmp/other.csv')
    return key_value_store


class TestKvsHook(unittest.TestCase):    # pragma: no cover

    def setUp(self) -> None:
        print()
        print('-'*80)
        self.logger = TestLogger()
        return super().setUp()

    def tearDown(self):
        print_logger_lines(logger=self.logger)
        self.logger = None
        return super().tearDown()

    def test_lookup_matches_command_and_context(self):
        store = populated_store()
        self.assertEqual(lookup_value(raw_key='${KVS:city:OUTPUT_FILE}', command='apply', context='default', logger=self.logger, hook_name='test', key_value_store=store), '/tmp/city.csv')
        self.assertEqual(lookup_value(raw_key='${KVS:city:OUTPUT_FILE}', command='apply', context='other', logger=self.logger, hook_name='test', key_value_store=store), '/tmp/other.csv')
        with self.assertRaises(UnresolvedReferenceException):
            lookup_value(raw_key='${KVS:city:SIDECAR_FILE}', command='apply', context='default', logger=self.logger, hook_name='test', key_value_store=store)
        with self.assertRaises(UnresolvedReferenceException):
            lookup_value(raw_key='KVS:city:OUTPUT_FILE', command='apply', context='default', logger=self.logger, hook_name='test', key_value_store=store)

    def test_whole_string_reference_keeps_its_type(self):
        data = {
            'featureTable': '${KVS:city:OUTPUT_FILE}',
            'count': '${KVS:city:FAVELA_CELLS}',
            'label': 'kappa=${KVS:crossval-gcn:GLOBAL_KAPPA} cells=${KVS:city:FAVELA_CELLS}',
            'summaries': ['${KVS:city:OUTPUT_FILE}', 'plain.json'],
            'nested': {'epochs': 3, 'flag': True},
        }
        resolved = analyse_data(data=data, key_value_store=populated_store(), command='apply', context='default', task_id='t', logger=self.logger, hook_name='test')
        self.assertEqual(resolved['featureTable'], '/tmp/city.csv')
        self.assertIsInstance(resolved['count'], int)
        self.assertEqual(resolved['count'], 1290)
        self.assertEqual(resolved['label'], 'kappa=0.5 cells=1290')
        self.assertEqual(resolved['summaries'], ['/tmp/city.csv', 'plain.json'])
        self.assertEqual(resolved['nested'], {'epochs': 3, 'flag': True})
        self.assertEqual(data['featureTable'], '${KVS:city:OUTPUT_FILE}')

    def test_is_iterable(self):
        self.assertTrue(is_iterable([1, 2]))
        self.assertFalse(is_iterable('abc'))
        self.assertFalse(is_iterable({'a': 1}))
        self.assertFalse(is_iterable(None))
        self.assertFalse(is_iterable(3))

    def test_resolver_saves_the_modified_spec(self):
        task = Task(
            kind='SpatialCrossValidation',
            version='v1',
            spec={'featureTable': '${KVS:city:OUTPUT_FILE}', 'model': 'gcn'},
            metadata={"identifiers": [{"type": "ManifestName", "key": "crossval-gcn"}]},
            logger=self.logger
        )
        spec_modifier_key = 'SpecModifier:crossval-gcn:apply:default:TASK_PRE_PROCESSING_START'
        new_store = spec_variable_key_value_store_resolver(
            hook_name='spec_variable_key_value_store_resolver',
            task=task,
            key_value_store=populated_store(),
            command='apply',
            context='default',
            task_life_cycle_stage=TaskLifecycleStage.TASK_PRE_PROCESSING_START,
            extra_parameters={'SpecModifierKey': spec_modifier_key},
            logger=self.logger
        )
        dump_key_value_store(test_class_name=self.__class__.__name__, test_method_name=stack()[0][3], key_value_store=new_store)
        self.assertEqual(new_store.store[spec_modifier_key], {'featureTable': '/tmp/city.csv', 'model': 'gcn'})
        self.assertEqual(task.spec['featureTable'], '${KVS:city:OUTPUT_FILE}')

    def test_resolver_ignores_other_stages_and_warns_on_missing_values(self):
        task = Task(
            kind='ModelComparison',
            version='v1',
            spec={'summaries': ['${KVS:crossval-mlp-local:SUMMARY_FILE}']},
            metadata={"identifiers": [{"type": "ManifestName", "key": "comparison"}]},
            logger=self.logger
        )
        spec_modifier_key = 'SpecModifier:comparison:apply:default:TASK_PRE_PROCESSING_START'
        other_stage = [stage for stage in TaskLifecycleStage if stage is not TaskLifecycleStage.TASK_PRE_PROCESSING_START][0]
        for stage in (other_stage, TaskLifecycleStage.TASK_PRE_PROCESSING_START):
            new_store = spec_variable_key_value_store_resolver(
                hook_name='spec_variable_key_value_store_resolver',
                task=task,
                key_value_store=populated_store(),
                command='apply',
                context='default',
                task_life_cycle_stage=stage,
                extra_parameters={'SpecModifierKey': spec_modifier_key},
                logger=self.logger
            )
            self.assertNotIn(spec_modifier_key, new_store.store)
        self.assertTrue(any('SUMMARY_FILE' in line for line in self.logger.warn_lines))


if __name__ == '__main__':
    unittest.main()
