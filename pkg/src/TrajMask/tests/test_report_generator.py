import json
import os
import shutil
import unittest

import pandas as pd

from ..capabilities import EvalReport
from ..exceptions import NotFoundException
from ..metrics import METRIC_FIELDS, MetricsWriter, RunManifest, format_tags, parse_tags, read_metrics
from ..report_generator import create_report, find_metrics, long_format, summarize, write_outputs


class TestMetricsWriter(unittest.TestCase):

    def setUp(self):
        """Set up a Result directory for each test."""
        self.output_dir = os.path.join(os.getcwd(), 'Result')
        os.makedirs(self.output_dir, exist_ok=True)
        self.path = os.path.join(self.output_dir, 'metrics.csv')

    def test_rows_carry_run_seed_and_tags(self):
        """Test the CSV columns and merged tags."""
        writer = MetricsWriter(self.path, 'train-abc-s0', 0, {'command': 'train'})
        writer.log(5, 'train_loss', 0.25)
        writer.child(task='FD').log(5, 'eval', 1.5)
        rows = read_metrics(self.path)
        self.assertEqual(list(rows[0]), METRIC_FIELDS)
        self.assertEqual(rows[0]['tags'], 'command=train')
        self.assertEqual(parse_tags(rows[1]['tags']), {'command': 'train', 'task': 'FD'})
        self.assertEqual(float(rows[1]['value']), 1.5)
        self.assertEqual(len(writer.rows), 2)

    def test_tags_are_sorted(self):
        """Test the tag encoding."""
        self.assertEqual(format_tags({'b': 1, 'a': 'x'}), 'a=x;b=1')
        self.assertEqual(parse_tags(''), {})

    def test_manifest(self):
        """Test that a run manifest is written as JSON."""
        path = RunManifest(run_id='r', command='train', seed=1, config_hash='abc').write(self.output_dir)
        with open(path) as f:
            payload = json.load(f)
        self.assertEqual(payload['command'], 'train')
        self.assertIn('numpy', payload['environment'])

    def tearDown(self):
        """Clean up test files after each test."""
        if os.path.exists(self.output_dir):
            shutil.rmtree(self.output_dir)


class TestReportGenerator(unittest.TestCase):

    def setUp(self):
        """Write metrics of two seeds and an evaluation report."""
        self.output_dir = os.path.join(os.getcwd(), 'Result')
        for seed, values in ((0, (4.0, 1.0)), (1, (6.0, 3.0))):
            run_dir = os.path.join(self.output_dir, 'run-s{0}'.format(seed))
            writer = MetricsWriter(os.path.join(run_dir, 'metrics.csv'), 'run-s{0}'.format(seed), seed,
                                   {'command': 'train'})
            writer.log(1, 'loss', values[0])
            writer.log(2, 'loss', values[1])
            writer.log(2, 'eval', 10.0 + seed, {'task': 'FD'})
        self.report = EvalReport(capability='CAPABILITIES', seed=3,
                                 metrics={'BC_return': -4.0, 'FD_loss': 0.1, 'random_ref': -9.0, 'extra': 1.0},
                                 raw_returns=[-4.5, -3.5])

    def test_long_format_has_tag_columns(self):
        """Test the long format drops wall clock and expands tags."""
        long = long_format(find_metrics([self.output_dir]))
        self.assertNotIn('wall_clock', long.columns)
        self.assertIn('command', long.columns)
        self.assertIn('task', long.columns)
        self.assertEqual(len(long), 6)

    def test_summary_uses_last_step_across_seeds(self):
        """Test mean, std and seed count of the last logged value."""
        summary = summarize(long_format(find_metrics([self.output_dir])))
        loss = summary[summary['metric'] == 'loss'].iloc[0]
        self.assertAlmostEqual(loss['mean'], 2.0)
        self.assertAlmostEqual(loss['std'], 2.0 ** 0.5)
        self.assertEqual(loss['n_seeds'], 2)
        self.assertEqual(summary[summary['metric'] == 'eval'].iloc[0]['task'], 'FD')

    def test_create_report(self):
        """Test CSV and Excel summaries."""
        written = create_report([self.output_dir], 'csv')
        self.assertTrue(os.path.exists(written['long']))
        self.assertEqual(len(pd.read_csv(written['summary'])), 2)
        written = create_report([self.output_dir], 'excel')
        self.assertTrue(written['summary'].endswith('.xlsx'))
        self.assertEqual(len(pd.read_excel(written['summary'])), 2)

    def test_missing_inputs(self):
        """Test that a missing input raises NotFoundException."""
        with self.assertRaises(NotFoundException):
            find_metrics([os.path.join(self.output_dir, 'nowhere')])
        empty = os.path.join(self.output_dir, 'empty')
        os.makedirs(empty)
        with self.assertRaises(NotFoundException):
            find_metrics([empty])

    def test_capability_outputs(self):
        """Test the txt, json and pdf renderings of a capability report."""
        paths = write_outputs(self.output_dir, self.report, ['txt', 'json', 'pdf'])
        self.assertEqual([os.path.basename(p) for p in paths],
                         ['capabilities_s3.txt', 'capabilities_s3.json', 'capabilities_s3.pdf'])
        with open(paths[0], encoding='utf-8') as f:
            text = f.read()
        self.assertLess(text.index('Rollouts'), text.index('References'))
        self.assertIn('Other', text)
        with open(paths[1], encoding='utf-8') as f:
            self.assertEqual(json.load(f)['metrics']['FD_loss'], 0.1)
        self.assertGreater(os.path.getsize(paths[2]), 0)

    def tearDown(self):
        """Clean up test files after each test."""
        if os.path.exists(self.output_dir):
            shutil.rmtree(self.output_dir)


if __name__ == '__main__':
    unittest.main()
