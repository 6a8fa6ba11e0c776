#!/usr/bin/env python
# -*- coding: utf-8 -*-
from setuptools import setup

setup(
    name='django-dycaf',
    version='0.1.0',
    description='Equilibrium multi-scale fusion with dual attention and class-aware adaptation, '
                'plus a Django-managed verification harness.',
    packages=[
        'dycaf',
        'dycaf.conf',
        'dycaf.management',
        'dycaf.management.commands',
        'dycaf.migrations',
        'dycaf.models',
        'dycaf.tests',
    ],
    include_package_data=True,
    zip_safe=False,
    classifiers=['Development Status :: 3 - Alpha',
                 'Framework :: Django',
                 'Intended Audience :: Science/Research',
                 'License :: OSI Approved :: BSD License',
                 'Operating System :: OS Independent',
                 'Programming Language :: Python :: 3',
                 'Topic :: Scientific/Engineering :: Artificial Intelligence'],
    python_requires='>=3.8',
    install_requires=[
        'Django>=4.2',
        'numpy>=1.24',
    ],
    entry_points={
        'console_scripts': [
            'dycaf = dycaf.cli:main',
        ],
    },
    license='BSD',
    test_suite="dycaf.tests",
)
