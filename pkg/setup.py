import re
from setuptools import setup, find_packages

def get_version():
    with open("sacforge/__init__.py") as f:
        match = re.search(r'__version__\s*=\s*["\']([^"\']+)', f.read())
        return match.group(1)

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="sacforge",
    version=get_version(),
    author="Your Name",
    author_email="your.email@example.com",
    description="Behavioral simulator for shape-based analog computing blocks and networks",
    long_description=long_description,
    long_description_content_type="text/markdown",
    url="https://github.com/yourusername/sacforge",
    packages=find_packages(exclude=["tests", "tests.*"]),
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering",
    ],
    entry_points={
        'console_scripts': [
            'sacforge=sacforge.cli_bench:main',
        ],
    },
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.21",
        "scipy>=1.8",
        "tomli>=1.1; python_version < '3.11'",
    ],
    extras_require={
        "test": ["pytest"],
    },
)
