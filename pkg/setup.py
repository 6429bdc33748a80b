import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

required_packages = ["numpy>=1.20, < 3.0", "scipy>=1.6, < 2.0"]

setuptools.setup(
    name="fedfed_sim",
    version="0.2.0",
    description="Deterministic federated learning simulator with noise-protected shared features",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=["fedfed_sim"],
    license="MIT-0 License",
    classifiers=[
        "Intended Audience :: Developers",
        "Intended Audience :: Science/Research",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
    ],
    python_requires=">=3.8",
    install_requires=required_packages,
    extras_require={"dev": ["black", "pytest"]},
    entry_points={"console_scripts": ["fedfed-sim=fedfed_sim.cli:main"]},
    include_package_data=True,
    package_data={"fedfed_sim": ["data/**"]},
)
