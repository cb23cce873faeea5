import json
from pathlib import Path

from fence.evalkit import evaluate_dataset, format_tables

from ._base import FenceCommand


class Command(FenceCommand):
    help = 'Score predicted masks and restorations against a synthetic dataset.'
    subcommand = 'eval'

    def add_command_arguments(self, parser):
        parser.add_argument('--manifest', type=Path, required=True)
        parser.add_argument('--pred', type=Path, required=True, help='directory of <sample_id>/ predictions')
        parser.add_argument('--out', type=Path, required=True, help='report JSON path')
        parser.add_argument('--match-histograms', action='store_true',
                            help='match restored colors to the clean reference before scoring')

    def run(self, options):
        with self.timer.stage('evaluate'):
            report = evaluate_dataset(options['manifest'], options['pred'], options['match_histograms'],
                                      threads=self.threads)

        out_path = options['out']
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report, indent=2, sort_keys=True))
        self.report(
            out_path.parent,
            arguments={key: options[key] for key in ('manifest', 'pred', 'out', 'match_histograms')},
            config={'match_histograms': options['match_histograms'], 'threads': self.threads},
            extra={'mean': report['mean']},
            files=[out_path],
        )
        self.stdout.write(format_tables(report))
