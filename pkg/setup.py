#pylint: skip-file
import re
import subprocess
import sys
from distutils.cmd import Command
from setuptools import setup, find_packages

def run_with_exit(command):
    returnCode = subprocess.call(command)
    if returnCode:
        sys.exit(returnCode)

class TestWithCoverage(Command):
    """Runs unit tests along with a test coverage report.
    """
    user_options = []

    def initialize_options(self):
        pass

    def finalize_options(self):
        pass

    def run(self):
        run_with_exit(['coverage', 'run', '-m', 'nose2', '-v'])
        run_with_exit(['coverage', 'report', '-m'])
        run_with_exit(['coverage', 'xml'])

version_regex = re.compile(r"^__version__ = '(\d+\.\d+\.\d+)'$", re.MULTILINE)
def get_package_version():
    with open('pyeegmae/__init__.py') as init:
        match = version_regex.search(init.read())
    if match is None:
        print('Found no __version__ in pyeegmae/__init__.py')
        sys.exit(-1)
    return match.group(1)

if __name__ == '__main__':
    thirdPartyPackages = open('required_packages.req').read().splitlines()
    testPackages = open('test_required_packages.req').read().splitlines()

    setup(name='pyeegmae',
          version=get_package_version(),
          packages=find_packages(exclude=['tests']),
          description='Compact multi-channel waveform encoder with alternating attention',
          python_requires='>=3.7',
          install_requires=thirdPartyPackages,
          tests_require=testPackages,
          test_suite='tests',
          entry_points={'console_scripts': ['pyeegmae = pyeegmae.cli:main']},
          cmdclass={'coverage': TestWithCoverage})
