from setuptools import find_packages, setup

with open("README.md", "r") as fh:
    long_description = fh.read()

exec(open("nashlearn/version.py").read())

setup(
    name="nashlearn",
    packages=find_packages(exclude=["tests"]),
    version=__version__,
    description="Distributed Nash-equilibrium seeking and inverse learning for multi-robot dynamic games.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3 :: Only",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    python_requires=">=3.8",
    install_requires=[
        "lxml",
        "numpy",
        "scipy",
    ],
    entry_points={
        "console_scripts": ["nashlearn=nashlearn.__main__:main"],
    },
)
