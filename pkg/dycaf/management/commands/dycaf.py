from django.core.management import call_command
from django.core.management.base import BaseCommand, CommandError

from dycaf.exceptions import ConfigError, DycafError
from dycaf.harness import COMMANDS, RunConfig, run_command
from dycaf.models import RunRecord


class Command(BaseCommand):
    help = "Run a dycaf verification command and emit its JSON report"

    def add_arguments(self, parser):
        parser.add_argument('command', choices=list(COMMANDS), help="which check to run")
        parser.add_argument('--config', help="key=value run configuration file")
        parser.add_argument('--out', help="write the JSON report here instead of stdout")
        parser.add_argument('--seed', type=int, help="overrides the configured seed")
        parser.add_argument('--threads', type=int, help="worker cap, 0 = one per CPU")
        parser.add_argument('--save', action='store_true', help="also store the report as a RunRecord")

    def handle(self, *args, **options):
        try:
            config = RunConfig.from_file(options['config']) if options['config'] else RunConfig()
            config.override(seed=options['seed'], threads=options['threads'], out=options['out'])
        except ConfigError as e:
            raise CommandError("invalid configuration: %s" % e, returncode=2)
        except OSError as e:
            raise CommandError("cannot read configuration: %s" % e, returncode=2)

        try:
            report = run_command(options['command'], config)
        except ConfigError as e:
            raise CommandError("invalid configuration: %s" % e, returncode=2)
        except DycafError as e:
            raise CommandError("%s aborted: %s" % (options['command'], e), returncode=1)

        if config['out']:
            report.write(config['out'])
            if options['verbosity'] > 0:
                self.stderr.write("report written to %s" % config['out'])
        else:
            self.stdout.write(report.to_json())

        if options['save']:
            call_command('migrate', 'dycaf', verbosity=0, interactive=False)
            record = RunRecord.objects.create_from_report(report)
            if options['verbosity'] > 0:
                self.stderr.write("saved run record %d" % record.pk)

        if not report.passed:
            raise CommandError("%s failed: %s" % (options['command'], ', '.join(report.failures())),
                               returncode=1)
