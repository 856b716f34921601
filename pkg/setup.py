from setuptools import setup, find_packages

setup(
    name="qdistill",
    version="0.1.0",
    packages=find_packages(exclude=["tests"]),
    install_requires=[
        "numpy>=1.22",
        "pyyaml>=6.0.1",
        "click>=8.1.7",
        "threadpoolctl>=3.1.0",
    ],
    extras_require={
        "test": ["pytest>=8.0.0"],
    },
    entry_points={
        'console_scripts': [
            'qdistill=qdistill.cli.commands:cli',
        ],
    },
)
