import glob
import json
import os
from typing import Dict, List, Optional, Sequence

import pandas as pd
from reportlab.lib import colors
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer

from .capabilities import EvalReport
from .exceptions import NotFoundException
from .metrics import parse_tags
from .utils import get_logger, to_jsonable

logger = get_logger('report')

# display order of the capability report; anything else follows alphabetically
CAPABILITY_SECTIONS = [
    ('Rollouts', ['BC_return', 'BC_score', 'RCBC_return', 'RCBC_score', 'rcbc_target', 'rcbc_spearman']),
    ('Held-out losses (normalized units)', ['FD_loss', 'FD_persistence_loss', 'ID_loss']),
    ('References', ['random_ref', 'expert_ref', 'behavior_return']),
]


def _sections(metrics: Dict[str, float]) -> List[tuple]:
    listed = {key for _, keys in CAPABILITY_SECTIONS for key in keys}
    sections = [(title, [(k, metrics[k]) for k in keys if k in metrics]) for title, keys in CAPABILITY_SECTIONS]
    rest = [(k, metrics[k]) for k in sorted(metrics) if k not in listed]
    if rest:
        sections.append(('Other', rest))
    return [(title, items) for title, items in sections if items]


def _fmt(value: float) -> str:
    return '{0:.6g}'.format(value)


def create_txt(output_file_name: str, report: EvalReport) -> str:
    """
    Writes a plain-text capability report.

    Args:
        output_file_name (str): Destination file.
        report (EvalReport): Report to render.

    Returns:
        str: The written path.
    """
    with open(output_file_name, 'w', encoding='utf-8') as output:
        output.writelines('Capability report\n')
        output.writelines('Seed: ' + str(report.seed) + '\n')
        for title, items in _sections(report.metrics):
            output.writelines('\n' + title + ':\n')
            for key, value in items:
                output.writelines('  {0}: {1}\n'.format(key, _fmt(value)))
        if report.raw_returns:
            output.writelines('\nRCBC episode returns: ' + ', '.join(_fmt(r) for r in report.raw_returns) + '\n')
    return output_file_name


def create_json(output_file_name: str, report: EvalReport) -> str:
    with open(output_file_name, 'w', encoding='utf-8') as f:
        json.dump(to_jsonable(report.to_dict()), f, indent=4, ensure_ascii=False)
    return output_file_name


def create_pdf(output_file_name: str, report: EvalReport) -> str:
    """
    Renders the capability report as a PDF.

    Args:
        output_file_name (str): Destination file.
        report (EvalReport): Report to render.

    Returns:
        str: The written path.
    """
    doc = SimpleDocTemplate(output_file_name, pagesize=letter)
    styles = getSampleStyleSheet()
    story = []

    title_style = ParagraphStyle(
        'TitleStyle',
        parent=styles['Title'],
        fontSize=18,
        alignment=1,
        spaceAfter=20,
        textColor=colors.darkblue
    )

    heading_style = ParagraphStyle(
        'HeadingStyle',
        parent=styles['Heading2'],
        fontSize=14,
        spaceAfter=10,
        textColor=colors.darkgreen
    )

    body_style = ParagraphStyle(
        'BodyStyle',
        parent=styles['BodyText'],
        fontSize=12,
        spaceAfter=6,
        textColor=colors.black
    )

    story.append(Paragraph('Capability Report', title_style))
    story.append(Paragraph('<b>Seed:</b> {0}'.format(report.seed), body_style))
    story.append(Spacer(1, 20))

    for title, items in _sections(report.metrics):
        story.append(Paragraph(title, heading_style))
        for key, value in items:
            story.append(Paragraph('<b>{0}:</b> {1}'.format(key, _fmt(value)), body_style))
        story.append(Spacer(1, 12))

    if report.raw_returns:
        story.append(Paragraph('RCBC episode returns', heading_style))
        story.append(Paragraph(', '.join(_fmt(r) for r in report.raw_returns), body_style))

    doc.build(story)
    return output_file_name


def write_outputs(directory: str, report: EvalReport, formats: Sequence[str]) -> List[str]:
    """Renders ``report`` once per requested format into ``directory``."""
    writers = {'txt': create_txt, 'json': create_json, 'pdf': create_pdf}
    paths = []
    for fmt in formats:
        path = os.path.join(directory, 'capabilities_s{0}.{1}'.format(report.seed, fmt))
        paths.append(writers[fmt](path, report))
        logger.info('wrote %s', path)
    return paths


def write_summary(directory: str, frame: pd.DataFrame, name: str = 'summary.csv') -> str:
    path = os.path.join(directory, name)
    frame.to_csv(path, index=False)
    return path


def find_metrics(inputs: Sequence[str]) -> List[str]:
    """Metrics files named directly or found (recursively) under the given directories."""
    paths = []
    for item in inputs:
        if os.path.isdir(item):
            paths.extend(sorted(glob.glob(os.path.join(item, '**', 'metrics.csv'), recursive=True)))
        elif os.path.isfile(item):
            paths.append(item)
        else:
            raise NotFoundException('report input {0} does not exist'.format(item))
    if not paths:
        raise NotFoundException('no metrics.csv under {0}'.format(list(inputs)))
    return paths


def long_format(paths: Sequence[str]) -> pd.DataFrame:
    """
    Concatenates metrics files into one plot-ready frame with one column per tag.

    Wall-clock times are dropped, so the result depends only on the logged values.
    """
    frames = []
    for path in paths:
        frame = pd.read_csv(path, keep_default_na=False)
        frame = frame.drop(columns=['wall_clock'])
        tags = pd.DataFrame([parse_tags(t) for t in frame['tags']], index=frame.index)
        frames.append(pd.concat([frame.drop(columns=['tags']), tags], axis=1))
    long = pd.concat(frames, ignore_index=True, sort=False)
    long['value'] = pd.to_numeric(long['value'])
    tag_columns = sorted(c for c in long.columns if c not in ('run_id', 'step', 'metric', 'value', 'seed'))
    long = long[['run_id', 'seed', 'step', 'metric', 'value'] + tag_columns]
    return long.sort_values(['run_id', 'seed', 'metric', 'step'] + tag_columns, kind='mergesort').reset_index(drop=True)


def summarize(long: pd.DataFrame) -> pd.DataFrame:
    """
    Mean, standard deviation and seed count of each metric at its last logged step, grouped by
    command and every tag.
    """
    keys = [c for c in long.columns if c not in ('run_id', 'seed', 'step', 'value')]
    group_keys = [k for k in keys if k != 'metric']
    filled = long.fillna({k: '' for k in keys})
    last = filled.sort_values('step', kind='mergesort').groupby(['seed'] + keys, sort=True).tail(1)
    summary = last.groupby(['metric'] + group_keys, sort=True)['value'].agg(['mean', 'std', 'count']).reset_index()
    return summary.rename(columns={'count': 'n_seeds'})


def create_report(inputs: Sequence[str], report_type: str, output_dir: Optional[str] = None) -> Dict[str, str]:
    """
    Aggregates metrics CSVs into a summary table and a long-format CSV.

    Args:
        inputs (Sequence[str]): Metrics files or run directories.
        report_type (str): ``csv`` or ``excel`` for the summary table.
        output_dir (str, optional): Destination, defaults to the first input directory.

    Returns:
        Dict[str, str]: Paths of the written ``summary`` and ``long`` files.
    """
    paths = find_metrics(inputs)
    long = long_format(paths)
    summary = summarize(long)
    result_dir = output_dir or (inputs[0] if os.path.isdir(inputs[0]) else os.path.dirname(inputs[0]) or '.')
    os.makedirs(result_dir, exist_ok=True)

    written = {'long': os.path.join(result_dir, 'metrics_long.csv')}
    long.to_csv(written['long'], index=False)
    if report_type == 'csv':
        written['summary'] = os.path.join(result_dir, 'trajmask_report.csv')
        summary.to_csv(written['summary'], index=False)
    elif report_type == 'excel':
        written['summary'] = os.path.join(result_dir, 'trajmask_report.xlsx')
        summary.to_excel(written['summary'], index=False)
    else:
        raise ValueError('report type must be csv or excel, got {0!r}'.format(report_type))
    logger.info('aggregated %d metrics files into %s', len(paths), written['summary'])
    return written
