#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""The setup script."""

from setuptools import setup, find_packages

with open('README.rst') as readme_file:
    readme = readme_file.read()

with open('CHANGELOG.rst') as changelog_file:
    changelog = changelog_file.read()

requirements = [
    'Click>=7.1',
    'PyYAML>=5.3',
    'psutil>=5.8',
    'pandas>=1.2',
    'numpy>=1.20',
    'scipy>=1.6',
]

setup_requirements = ['pytest-runner', ]

test_requirements = ['pytest', ]

setup(
    author="URLLC allocator developers",
    classifiers=[
        'Development Status :: 2 - Pre-Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Natural Language :: English',
        'Programming Language :: Python :: 3.8',
        'Topic :: Scientific/Engineering',
    ],
    description="Joint power and bandwidth allocation for URLLC with "
                "unsupervised learning",
    entry_points={
        'console_scripts': [
            'urllc_allocator=urllc_allocator.cli:main',
        ],
    },
    install_requires=requirements,
    license="MIT license",
    long_description=readme + '\n\n' + changelog,
    include_package_data=True,
    package_data={'urllc_allocator': ['data/*.yml']},
    keywords='urllc_allocator',
    name='urllc_allocator',
    packages=find_packages(include=['urllc_allocator']),
    setup_requires=setup_requirements,
    test_suite='tests',
    tests_require=test_requirements,
    version='0.1.0',
    zip_safe=False,
)
