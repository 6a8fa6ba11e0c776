"""
Console entry point: ``dycaf <command> [options]`` is the ``dycaf``
management command with the bundled settings.
"""
import os
import sys


def main(argv=None):
    argv = sys.argv if argv is None else argv
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'dycaf.settings')

    from django.core.management import execute_from_command_line

    execute_from_command_line([argv[0], 'dycaf'] + list(argv[1:]))


if __name__ == '__main__':
    main()
